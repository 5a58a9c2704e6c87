"""
Dataset, training and evaluation at toy scale
=============================================

The full pipeline on two training objects and two stiffnesses, small enough
to run in a couple of minutes. The desk preset is the same code with more
objects, four stiffnesses and six augmentations.
"""
import tempfile
from pathlib import Path

from stiffgrasp import dataset as ds
from stiffgrasp import experiment as ex
from stiffgrasp.geometry import LIBRARY, TEST_OBJECTS
from stiffgrasp.net import GraspNet, NetConfig, TrainConfig, input_planes, target_planes, train

work = Path(tempfile.mkdtemp(prefix="stiffgrasp-"))

# %%
# Generate: every scene is simulated once per candidate and then augmented.
cfg = ds.DatasetConfig(objects=[LIBRARY[11], LIBRARY[1]], e_sweep=(2e4, 2e9), augmentations=2,
                       n_candidates=20, max_labeled=4, split_fractions={"train": 0.5, "val": 0.5})
ds.generate_dataset(cfg, work / "data")
manifest = ds.load_manifest(work / "data")
print(f"{len(manifest['entries'])} samples, checksum {manifest['checksum'][:16]}")
for e in manifest["entries"][:4]:
    s = ds.read_sample(work / "data" / e["file"])
    print(e["file"], "labelled grasps:", len(s.metadata["grasps"]), "region moduli:", s.metadata["E"])

# %%
# Train both variants on the same split.
models = {}
for name, channels in (("stiffness", 2), ("depth-only", 1)):
    ncfg = NetConfig(input_channels=channels)
    tr, va = ds.load_split(manifest, "train"), ds.load_split(manifest, "val")
    res = train(GraspNet(ncfg, seed=0), input_planes(tr, ncfg), target_planes(tr),
                input_planes(va, ncfg), target_planes(va), TrainConfig(epochs=5, batch_size=2))
    models[name] = res.net
    print(name, "best epoch", res.best_epoch, "val loss", round(res.history[res.best_epoch]["val_loss"], 4))

# %%
# Evaluate on one held-out object and write the chart.
report = ex.evaluate(ex.ExperimentConfig(test_objects=[TEST_OBJECTS[3]], e_sweep=(2e4, 2e9), k=2), models)
print(ex.degradation_table(report))
paths = ex.write_report_files(report, work / "report")
print("chart:", paths["svg"])
