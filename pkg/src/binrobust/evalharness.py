"""Datasets, robustness metrics, curves, tables, heatmaps, and CAM."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import (AttackSpec, MIN_NORM_ATTACKS, min_norm_to_curve,
                      run_attack)


class FormatError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N,C,H,W) in [0,1]
    labels: np.ndarray          # (N,) ints
    class_names: list = None
    split: str = "test"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)


CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
_CIFAR_RECORD = 3073        # 1 label byte + 3*32*32 pixel bytes
_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILE = "test_batch.bin"


def _parse_cifar_file(path):
    blob = np.fromfile(path, dtype=np.uint8)
    if blob.size % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: {blob.size} bytes is not a multiple of the "
            f"{_CIFAR_RECORD}-byte record (label + 3072 pixels)")
    rec = blob.reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of [0,9]")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory, split="test") -> Dataset:
    """Parse the canonical CIFAR-10 binary batch files (plane-major RGB)."""
    files = _CIFAR_TRAIN_FILES if split == "train" else [_CIFAR_TEST_FILE]
    images, labels = [], []
    for name in files:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch file {path}")
        im, lb = _parse_cifar_file(path)
        images.append(im)
        labels.append(lb)
    return Dataset(np.concatenate(images), np.concatenate(labels),
                   class_names=list(CIFAR10_CLASSES), split=split)


def subsample(ds: Dataset, n, seed=0) -> Dataset:
    """Seeded uniform sample without replacement; stable across runs."""
    if n > len(ds):
        raise MetricError(f"cannot subsample {n} from {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return Dataset(ds.images[idx], ds.labels[idx], ds.class_names, ds.split)


def synth_dataset(num_classes=2, n=200, hw=(8, 8), channels=3, seed=0,
                  noise=0.1, split="train", template_seed=1234) -> Dataset:
    """Gaussian-blob class images; linearly separable by construction.

    Class templates depend only on ``template_seed`` (and the geometry), so
    train/test splits drawn with different ``seed`` share the same classes.
    """
    rng = np.random.default_rng(seed)
    h, w = hw
    templates = np.random.default_rng(template_seed).uniform(
        0.25, 0.75, size=(num_classes, channels, h, w))
    labels = rng.integers(0, num_classes, size=n)
    images = templates[labels] + rng.normal(0, noise, size=(n, channels, h, w))
    return Dataset(np.clip(images, 0, 1), labels,
                   class_names=[f"class{i}" for i in range(num_classes)],
                   split=split)


IMAGENET10_WNIDS = {
    "fish": ["n01443537", "n01484850", "n01491361", "n01494475", "n01496331"],
    "bird": ["n01530575", "n01531178", "n01532829", "n01534433", "n01537544"],
    "gecko": ["n01629819", "n01630670", "n01631663", "n01632458", "n01632777"],
    "turtle": ["n01664065", "n01665541", "n01667114", "n01667778", "n01669191"],
    "snake": ["n01728572", "n01728920", "n01729322", "n01729977", "n01734418"],
    "spider": ["n01773157", "n01773549", "n01773797", "n01774384", "n01774750"],
    "dog": ["n02085620", "n02087046", "n02085936", "n02086079", "n02086240"],
    "cat": ["n02123045", "n02123159", "n02123394", "n02123597", "n02124075"],
    "butterfly": ["n02276258", "n02277742", "n02279972", "n02280649", "n02281406"],
    "sheep": ["n02412080", "n02415577", "n02417914", "n02422106", "n02422699"],
}


def imagenet10_classmap():
    """The 10 coarse classes, each mapped to its five source wnids."""
    return {k: list(v) for k, v in IMAGENET10_WNIDS.items()}


def load_tensor_blob(manifest_path) -> Dataset:
    """Pre-converted image tensors: JSON manifest + raw little-endian f32."""
    with open(manifest_path) as f:
        meta = json.load(f)
    base = os.path.dirname(manifest_path)
    shape = meta["shape"]
    blob = np.fromfile(os.path.join(base, meta["data_file"]), dtype="<f4")
    expect = int(np.prod(shape))
    if blob.size != expect:
        raise FormatError(f"blob has {blob.size} floats, manifest declares {expect}")
    return Dataset(blob.reshape(shape), np.asarray(meta["labels"]),
                   class_names=meta.get("class_names"))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def clean_accuracy(model, ds: Dataset) -> float:
    return float((model.predict(ds.images) == ds.labels).mean())


def adv_accuracy(model, ds: Dataset, spec: AttackSpec, surrogate=None,
                 return_results=False, workers=1):
    """Fraction of images still correctly classified after the attack."""
    results = attack_dataset(model, ds, spec, surrogate=surrogate,
                             workers=workers)
    correct = sum(1 for r in results if not r.success)
    acc = correct / len(ds)
    return (acc, results) if return_results else acc


_POOL_CTX: dict = {}


def _pool_attack_one(i):
    c = _POOL_CTX
    return run_attack(c["model"], c["x"][i], int(c["y"][i]), c["spec"],
                      image_index=i)


def attack_dataset(model, ds: Dataset, spec: AttackSpec, surrogate=None,
                   workers=1):
    """Per-image attack invocations in canonical (index) order.

    ``workers > 1`` forks a process pool; results are gathered back in index
    order and each image draws its own seed stream, so outputs are identical
    at any worker count.
    """
    target = surrogate if surrogate is not None else model
    if workers > 1 and len(ds) > 1:
        import multiprocessing
        _POOL_CTX.update(model=target, x=ds.images, y=ds.labels, spec=spec)
        try:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                results = pool.map(_pool_attack_one, range(len(ds)))
        finally:
            _POOL_CTX.clear()
    else:
        results = []
        for i in range(len(ds)):
            results.append(run_attack(target, ds.images[i], int(ds.labels[i]),
                                      spec, image_index=i))
    if surrogate is not None:
        # transfer: re-score the surrogate-crafted examples on the real target
        advs = np.stack([r.adv for r in results])
        preds = model.predict(advs)
        for i, r in enumerate(results):
            r.success = bool(preds[i] != ds.labels[i])
    return results


def acc_norm(acc_star, acc) -> float:
    """Normalized adversarial accuracy ACC*/ACC."""
    if acc <= 0:
        raise MetricError("clean accuracy is zero; normalized accuracy undefined")
    return acc_star / acc


def robustness_score(norm_accs) -> float:
    """Mean normalized adversarial accuracy over an attack family."""
    norm_accs = list(norm_accs)
    if not norm_accs:
        raise MetricError("robustness score over an empty attack family")
    return float(np.mean(norm_accs))


def curve(model, ds: Dataset, spec: AttackSpec, eps_grid, surrogate=None,
          workers=1):
    """Accuracy-vs-budget points (eps, ACC_norm).

    Budgeted attacks rerun per budget; min-norm attacks run once and are
    thresholded on their achieved norms.
    """
    eps_grid = list(eps_grid)
    if sorted(eps_grid) != eps_grid:
        raise MetricError("eps grid must be sorted ascending")
    acc = clean_accuracy(model, ds)
    points = []
    if spec.method in MIN_NORM_ATTACKS:
        results = attack_dataset(model, ds, spec, surrogate=surrogate,
                                 workers=workers)
        accs = min_norm_to_curve(results, eps_grid, norm=spec.norm)
        points = [(float(e), acc_norm(a, acc)) for e, a in zip(eps_grid, accs)]
    else:
        for eps in eps_grid:
            s = AttackSpec(spec.method, spec.norm, float(eps), spec.steps,
                           spec.query_budget, spec.seed, dict(spec.constants))
            a = adv_accuracy(model, ds, s, surrogate=surrogate,
                             workers=workers)
            points.append((float(eps), acc_norm(a, acc)))
    return points


def pointwise_table(models: dict, ds: Dataset, specs, families=None):
    """ACC_norm matrix over (attack, model) plus per-family RS rows.

    ``models`` maps name -> model; ``specs`` is a list of AttackSpec.
    Returns {"columns", "rows": [(label, values)], "rs": {family: values}}.
    """
    names = list(models)
    cleans = {n: clean_accuracy(models[n], ds) for n in names}
    rows = []
    fam_values = {}
    from .attacks import FAMILY
    for spec in specs:
        vals = []
        for n in names:
            a = adv_accuracy(models[n], ds, spec)
            vals.append(acc_norm(a, cleans[n]))
        rows.append((spec.method, vals))
        fam = (families or FAMILY).get(spec.method, "other")
        fam_values.setdefault(fam, []).append(vals)
    rs = {fam: [robustness_score([v[i] for v in vals]) for i in range(len(names))]
          for fam, vals in fam_values.items()}
    return {"columns": names, "clean": cleans, "rows": rows, "rs": rs}


def transfer_heatmap(models: dict, ds: Dataset, spec: AttackSpec, workers=1):
    """Matrix of ACC_norm: entry (s, t) evaluates target t on examples
    crafted against surrogate s.  Diagonal is the self-attack."""
    names = list(models)
    if not names:
        raise MetricError("heatmap needs at least one model")
    cleans = {n: clean_accuracy(models[n], ds) for n in names}
    mat = np.zeros((len(names), len(names)))
    for i, s in enumerate(names):
        results = attack_dataset(models[s], ds, spec, workers=workers)
        advs = np.stack([r.adv for r in results])
        for j, t in enumerate(names):
            preds = models[t].predict(advs)
            acc_star = float((preds == ds.labels).mean())
            mat[i, j] = acc_norm(acc_star, cleans[t])
    return names, mat


# ---------------------------------------------------------------------------
# class activation maps
# ---------------------------------------------------------------------------

def compute_cam(model, x, class_id):
    """Head-weighted sum of final feature maps, min-max normalized,
    nearest-neighbor upsampled to the input resolution."""
    if not hasattr(model, "head"):
        raise MetricError("CAM requires a global-average-pool + linear head")
    logits, feats = model.forward(None, ad.Var(x[None].astype(np.float32)),
                                  training=False, return_features=True)
    fmap = feats.data[0]                       # (C,h,w)
    weights = model.head.w.data[class_id]      # (C,)
    cam = np.tensordot(weights, fmap, axes=(0, 0))
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo < 1e-12:
        cam = np.zeros_like(cam)
    else:
        cam = (cam - lo) / (hi - lo)
    h, w = x.shape[-2:]
    ch, cw = cam.shape
    ri = (np.arange(h) * ch // h).clip(0, ch - 1)
    ci = (np.arange(w) * cw // w).clip(0, cw - 1)
    return cam[ri[:, None], ci[None, :]].astype(np.float32)


def roi_concentration(cam, threshold=0.5) -> float:
    """Fraction of CAM pixels above threshold; smaller = more concentrated."""
    cam = np.asarray(cam)
    return float((cam > threshold).mean())


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def report_to_json(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def curve_to_csv(points, path):
    with open(path, "w") as f:
        f.write("eps,acc_norm\n")
        for e, a in points:
            f.write(f"{e:.10g},{a:.10g}\n")


def heatmap_to_csv(names, mat, path):
    with open(path, "w") as f:
        f.write("surrogate\\target," + ",".join(names) + "\n")
        for i, n in enumerate(names):
            f.write(n + "," + ",".join(f"{v:.10g}" for v in mat[i]) + "\n")
