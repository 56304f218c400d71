# The three experiment settings on a small synthetic task, then a comparison table.
# Run: python3 demos/03_three_settings.py   (about a minute on one core)
#
# Width-reduced models and lr 1e-3 keep this quick.  For CIFAR-10 use the CLI:
#   edgexc train --model optimized --preprocess rowavg --data-dir cifar-10-batches-bin --out m.csv

# %%
import tempfile
from pathlib import Path

from edgexc import cli, data, train

train_set = data.make_synthetic(3, 32, 32, seed=0)
test_set = data.make_synthetic(3, 8, 32, seed=1, split="test")
print(len(train_set), "train images,", len(test_set), "test images")

# %% row averaging smooths each pixel with the rows above and below
before = train_set.images[:1]
after = data.row_average(before)
print("pixel std before/after:", before.std(), after.std())

# %% train each setting for a few epochs
out = Path(tempfile.mkdtemp())
for setting in train.SETTINGS:
    cfg = train.TrainConfig(setting, epochs=4, learning_rate=1e-3, batch_size=16, width_scale=1 / 8, num_classes=3)
    rows = train.run_experiment(cfg, train_set, test_set)
    train.write_metrics_csv(rows, out / f"{setting}.csv")
    print(setting, "final val_acc", rows[-1].val_acc)

# %% side by side, with deltas against the first file
cli.main(["compare", *(str(out / f"{s}.csv") for s in train.SETTINGS)])
