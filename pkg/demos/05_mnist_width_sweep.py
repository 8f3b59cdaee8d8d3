"""Run the MNIST 0-vs-1 width sweep through the experiment runner, the same
path the command line uses, and read the summary back."""

# %%
from pathlib import Path

from deqflow.experiments import load_config, run_experiment

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "mnist_width_sweep.json")
cfg = cfg.with_overrides(seeds=(0,))
result = run_experiment(cfg, out_dir=root / "results" / "demo-mnist")

# %%
for row in result.rows():
    print(f"m = {row['m']:4d}  time to loss 1e-3: {row['time_to_threshold']:.1f}  "
          f"final test ramp loss {row['final_test_loss']:.4f}")
print("artifacts in", result.out_dir)
