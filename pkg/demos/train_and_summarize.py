# Train a small hybrid model for a few epochs, evaluate it, then turn the
# evaluation into a grounded plain-text summary. Takes a minute on one core.

from dpcpheno.model import ModelConfig
from dpcpheno.pipeline import TrainConfig, evaluate, model_from_state, train
from dpcpheno.summarizer import build_evidence, render_summary
from dpcpheno.synth import SynthConfig, split_dataset, synthesize

ds, oracle = synthesize(SynthConfig(n_per_class=200, seed=2))
ds = split_dataset(ds, {"train": 400, "val": 50, "test": 150}, seed=2)

# narrower than the default network so the demo stays quick
small = ModelConfig(cnn_stem_out=16, inception_split=(6, 6, 4), cnn_token_dim=32,
                    vit_dim=32, vit_heads=2, vit_blocks=1, fused_dim=32)
cfg = TrainConfig(epochs=15, batch_size=32, lr_init=2e-3, lr_final=2e-4, augment=False, model=small)
result = train(cfg, ds)
for entry in result.log.epochs:
    print(entry["epoch"], round(entry["val_accuracy"], 3), round(entry["val_mean_r"], 3))

model = model_from_state(result.model, result.best_state)
report, probs, reg = evaluate(model, ds.split("test"), stats=result.stats)
acc_ceiling, r_ceiling = oracle.ceiling(ds.splits["test"])
print(f"test accuracy {report.accuracy:.3f} (ceiling {acc_ceiling:.3f})")
print(f"test mean r {report.mean_r:.3f} (ceiling {r_ceiling.mean():.3f})")

bundle = build_evidence(report, probs, reg)
print(render_summary(bundle))
