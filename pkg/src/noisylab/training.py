"""Training loop: SGD with momentum, step LR schedule, metrics collection,
run directories, checkpointing, and the 7-row ablation grid.

Everything on the default path is single-threaded and seeded, so two runs
of the same config produce identical parameters and metrics. Shuffle order
and augmentation pipelines are derived from (seed, epoch, index) rather
than from mutable RNG state, which makes checkpoint resume exact.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .augment import AugmentPolicy, augment_batch
from .autodiff import Tensor
from .data import (
    LabeledDataset,
    NoiseSpec,
    generate_blobs,
    inject_noise,
    load_dataset,
    save_dataset,
)
from .losses import (
    AlphaSchedule,
    LossSwitches,
    alpha_at,
    bootstrap_loss,
    cluster_loss,
    reconstruction_loss,
    total_loss,
)
from .models import ModelSet

CKPT_MAGIC = b"NLCK"
CKPT_VERSION = 1
DIVERGENCE_LIMIT = 1e4

METRICS_COLUMNS = [
    "epoch", "lr", "alpha", "loss_total", "loss_bootstrap", "loss_rec",
    "loss_cluster_R", "loss_cluster_KL", "loss_cluster_Hcx",
    "train_acc_noisy", "val_acc_clean", "corrupted_subset_acc", "seconds",
]

ABLATION_ROWS = [
    ("CE", False, False, False),
    ("+A", True, False, False),
    ("+B", False, True, False),
    ("+C", False, False, True),
    ("+A+B", True, True, False),
    ("+A+C", True, False, True),
    ("+A+B+C", True, True, True),
]


class DivergenceError(RuntimeError):
    """Loss exploded or went NaN; the run directory keeps the last good
    checkpoint."""


class RunLockError(RuntimeError):
    """Another process holds the run directory."""


# ---------------------------------------------------------------------------
# Optimizer and LR schedule
# ---------------------------------------------------------------------------

class SgdOptimizer:
    """SGD with momentum and coupled weight decay.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            if np.any(np.isnan(grad)):
                raise DivergenceError(f"NaN gradient in parameter {name!r}")
            v = self.momentum * self.velocities[name] + grad + self.weight_decay * p.data
            self.velocities[name] = v
            p.data = p.data - lr * v


def lr_at(base_lr: float, epoch: int, total_epochs: int, milestones=(0.5, 0.75), step_ratio: float = 0.1) -> float:
    passed = sum(1 for m in milestones if epoch >= m * total_epochs)
    return base_lr * step_ratio**passed


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i4": 2, "|u1": 3}
_CODE_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "|u1"}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict, config_hash: str, epoch: int, best_acc: float, best_epoch: int) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sH64sidi", CKPT_MAGIC, CKPT_VERSION,
                             config_hash.encode(), epoch, best_acc, best_epoch))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            dtype_str = arr.dtype.newbyteorder("<").str if arr.dtype.kind == "f" or arr.dtype.kind == "i" else arr.dtype.str
            if dtype_str not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dtype_str], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(dtype_str, copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head_fmt = "<4sH64sidi"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, hash_bytes, epoch, best_acc, best_epoch = struct.unpack_from(head_fmt, blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    offset = head_size
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        code, ndim = struct.unpack_from("<BB", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        dtype = np.dtype(_CODE_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=max(1, int(np.prod(shape, dtype=np.int64))) if ndim else 1, offset=offset).reshape(shape).copy()
        offset += nbytes
    meta = {
        "config_hash": hash_bytes.decode(),
        "epoch": epoch,
        "best_acc": best_acc,
        "best_epoch": best_epoch,
    }
    return arrays, meta


# ---------------------------------------------------------------------------
# Experiment wiring
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    cfg: dict
    dataset: LabeledDataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    models: ModelSet
    optimizer: SgdOptimizer
    policy: AugmentPolicy
    switches: LossSwitches
    schedule: AlphaSchedule

    @property
    def train_set(self):
        return self.dataset.subset(self.train_idx)


def build_dataset(cfg: dict) -> LabeledDataset:
    if cfg["data.kind"] == "images":
        shape = (cfg["data.image_size"], cfg["data.image_size"])
    else:
        shape = cfg["data.dims"]
    ds = generate_blobs(cfg["data.samples"], cfg["data.classes"], shape,
                        cfg["data.separation"], cfg["seeds.data"])
    if cfg["noise.kind"] != "none" and cfg["noise.epsilon"] > 0:
        spec = NoiseSpec(kind=cfg["noise.kind"], epsilon=cfg["noise.epsilon"],
                         num_classes=cfg["data.classes"], seed=cfg["seeds.data"] + 1,
                         wrap_last_class=cfg["noise.wrap_last_class"])
        ds = inject_noise(ds, spec)
    return ds


def split_indices(cfg: dict, n: int):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg["seeds.data"], 17))))
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg["data.val_fraction"] * n)))
    return order[n_val:], order[:n_val]


def build_schedule(cfg: dict) -> AlphaSchedule:
    total = cfg["train.epochs"]
    if cfg["alpha.kind"] == "constant":
        return AlphaSchedule(kind="constant", value=cfg["alpha.constant"])
    start = int(round(cfg["alpha.start_frac"] * total))
    end = max(start + 1, int(round(cfg["alpha.end_frac"] * total)))
    return AlphaSchedule(kind=cfg["alpha.kind"], start_epoch=start, end_epoch=end)


def build_experiment(cfg: dict, dataset: LabeledDataset | None = None) -> Experiment:
    cfg = config_mod.validate(dict(cfg))
    ds = dataset if dataset is not None else build_dataset(cfg)
    train_idx, val_idx = split_indices(cfg, len(ds))
    clusters = cfg["model.clusters"] or cfg["data.classes"]
    models = ModelSet(
        input_shape=ds.input_shape,
        num_classes=cfg["data.classes"],
        num_clusters=clusters,
        feature_dim=cfg["model.feature_dim"],
        hidden=cfg["model.hidden"],
        backbone_kind=cfg["model.backbone"],
        init_seed=cfg["seeds.init"],
    )
    optimizer = SgdOptimizer(models.parameters(), cfg["optim.momentum"], cfg["optim.weight_decay"])
    policy = AugmentPolicy(op_pool=tuple(cfg["augment.ops"]),
                           num_ops=cfg["augment.num_ops"],
                           magnitude=cfg["augment.magnitude"])
    switches = LossSwitches(bootstrap=cfg["losses.A"],
                            reconstruction=cfg["losses.B"],
                            cluster=cfg["losses.C"])
    return Experiment(cfg=cfg, dataset=ds, train_idx=train_idx, val_idx=val_idx,
                      models=models, optimizer=optimizer, policy=policy,
                      switches=switches, schedule=build_schedule(cfg))


def _onehot(labels, num_classes, dtype=np.float32):
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def predict_classes(models: ModelSet, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(features), dtype=np.int64)
    for lo in range(0, len(features), batch_size):
        chunk = Tensor(features[lo : lo + batch_size])
        logits = models.classifier.logits(models.backbone(chunk))
        preds[lo : lo + batch_size] = logits.data.argmax(axis=-1)
    return preds


def _accuracy(preds, labels):
    if len(labels) == 0:
        return 1.0
    return float(np.mean(preds == labels))


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    alpha: float
    loss_total: float
    loss_bootstrap: float
    loss_rec: float
    loss_cluster_R: float
    loss_cluster_KL: float
    loss_cluster_Hcx: float
    train_acc_noisy: float
    val_acc_clean: float
    corrupted_subset_acc: float
    seconds: float

    def row(self):
        return [
            str(self.epoch), repr(self.lr), repr(self.alpha), repr(self.loss_total),
            repr(self.loss_bootstrap), repr(self.loss_rec), repr(self.loss_cluster_R),
            repr(self.loss_cluster_KL), repr(self.loss_cluster_Hcx),
            repr(self.train_acc_noisy), repr(self.val_acc_clean),
            repr(self.corrupted_subset_acc), repr(self.seconds),
        ]


def train_epoch(exp: Experiment, epoch: int) -> MetricsRecord:
    """One pass over shuffled train batches, then a full evaluation."""
    cfg = exp.cfg
    t0 = time.perf_counter()
    total_epochs = cfg["train.epochs"]
    lr = lr_at(cfg["optim.lr"], epoch, total_epochs, cfg["optim.milestones"], cfg["optim.step_ratio"])
    alpha = alpha_at(exp.schedule, epoch, total_epochs)

    ds = exp.dataset
    c = ds.num_classes
    noisy_onehot = _onehot(ds.noisy_labels, c)

    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg["seeds.data"], 23, epoch))))
    order = exp.train_idx[shuffle_rng.permutation(len(exp.train_idx))]

    batch_size = cfg["train.batch_size"]
    sums = {"total": 0.0, "bootstrap": 0.0, "rec": 0.0, "R": 0.0, "KL": 0.0, "Hcx": 0.0}
    seen = 0

    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        x_clean_np = ds.features[idx]
        x_aug_np = augment_batch(exp.policy, x_clean_np, cfg["seeds.augment"], epoch, idx)
        x_aug = Tensor(x_aug_np)
        feat_aug = exp.models.backbone(x_aug)

        feat_clean = None
        if exp.switches.cluster or cfg["losses.classification_view"] == "clean":
            feat_clean = exp.models.backbone(Tensor(x_clean_np))

        parts = {}
        if exp.switches.bootstrap:
            feats = feat_clean if cfg["losses.classification_view"] == "clean" else feat_aug
            log_pred = exp.models.classifier.log_probs(feats)
            parts["bootstrap"] = bootstrap_loss(log_pred, noisy_onehot[idx], alpha)
        if exp.switches.reconstruction:
            x_hat = exp.models.decoder(feat_aug)
            parts["reconstruction"] = reconstruction_loss(x_hat, x_clean_np)
        if exp.switches.cluster:
            clean_probs = exp.models.cluster_head(feat_clean)
            aug_probs = exp.models.cluster_head(feat_aug)
            parts["cluster"] = cluster_loss(clean_probs, aug_probs, cfg["losses.lambda"],
                                            cfg["losses.block_target_grad"])

        breakdown = total_loss(parts, exp.switches)
        if not math.isfinite(breakdown.total) or breakdown.total > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"loss {breakdown.total} at epoch {epoch} exceeds the divergence guard"
            )

        exp.models.zero_grad()
        breakdown.total_tensor.backward()
        exp.optimizer.step(lr)

        n = len(idx)
        seen += n
        sums["total"] += breakdown.total * n
        sums["bootstrap"] += breakdown.bootstrap * n
        sums["rec"] += breakdown.reconstruction * n
        sums["R"] += breakdown.cluster_parts[0] * n
        sums["KL"] += breakdown.cluster_parts[1] * n
        sums["Hcx"] += breakdown.cluster_parts[2] * n

    train_preds = predict_classes(exp.models, ds.features[exp.train_idx])
    val_preds = predict_classes(exp.models, ds.features[exp.val_idx])
    corrupted_mask = ds.corrupted[exp.train_idx]
    corrupted_preds = train_preds[corrupted_mask]
    corrupted_clean = ds.clean_labels[exp.train_idx][corrupted_mask]

    return MetricsRecord(
        epoch=epoch,
        lr=lr,
        alpha=alpha,
        loss_total=sums["total"] / seen,
        loss_bootstrap=sums["bootstrap"] / seen,
        loss_rec=sums["rec"] / seen,
        loss_cluster_R=sums["R"] / seen,
        loss_cluster_KL=sums["KL"] / seen,
        loss_cluster_Hcx=sums["Hcx"] / seen,
        train_acc_noisy=_accuracy(train_preds, ds.noisy_labels[exp.train_idx]),
        val_acc_clean=_accuracy(val_preds, ds.clean_labels[exp.val_idx]),
        corrupted_subset_acc=_accuracy(corrupted_preds, corrupted_clean),
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"run directory is locked: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _ckpt_state(exp: Experiment) -> dict:
    arrays = dict(exp.models.state_arrays())
    for name, v in exp.optimizer.velocities.items():
        arrays[f"velocity.{name}"] = v
    return arrays


def _write_metrics_header(path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")


def _append_metrics(path, record: MetricsRecord):
    with open(path, "a", newline="") as fh:
        fh.write(",".join(record.row()) + "\n")


def run_experiment(cfg: dict, out_dir, stop_after: int | None = None, resume: bool = False) -> dict:
    """Execute all epochs of a config into a self-describing run directory.

    Layout: config.txt, dataset.bin, metrics.csv, checkpoints/{init,best,last},
    summary.json. With ``resume=True`` the directory must hold a previous
    partial run; training continues from the last checkpoint. ``stop_after``
    stops cleanly after that many additional epochs (used to exercise
    resume).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    with _RunLock(out_dir):
        if resume:
            cfg = config_mod.load(out_dir / "config.txt")
            dataset = load_dataset(out_dir / "dataset.bin")
            exp = build_experiment(cfg, dataset)
            arrays, meta = load_checkpoint(ckpt_dir / "last.ckpt")
            chash = config_mod.config_hash(cfg)
            if meta["config_hash"] != chash:
                raise CheckpointError("checkpoint was written by a different config")
            _load_ckpt_state(exp, arrays)
            start_epoch = meta["epoch"]
            best_acc, best_epoch = meta["best_acc"], meta["best_epoch"]
        else:
            cfg = config_mod.validate(dict(cfg))
            exp = build_experiment(cfg)
            chash = config_mod.config_hash(cfg)
            config_mod.dump(cfg, out_dir / "config.txt")
            save_dataset(exp.dataset, out_dir / "dataset.bin")
            _write_metrics_header(metrics_path)
            save_checkpoint(ckpt_dir / "init.ckpt", _ckpt_state(exp), chash, 0, -1.0, -1)
            start_epoch = 0
            best_acc, best_epoch = -1.0, -1

        total = cfg["train.epochs"]
        end_epoch = total if stop_after is None else min(total, start_epoch + stop_after)
        record = None
        for epoch in range(start_epoch, end_epoch):
            record = train_epoch(exp, epoch)
            _append_metrics(metrics_path, record)
            if record.val_acc_clean > best_acc:
                best_acc, best_epoch = record.val_acc_clean, epoch
                save_checkpoint(ckpt_dir / "best.ckpt", _ckpt_state(exp), chash, epoch + 1, best_acc, best_epoch)
            save_checkpoint(ckpt_dir / "last.ckpt", _ckpt_state(exp), chash, epoch + 1, best_acc, best_epoch)

        finished = end_epoch == total
        summary = {
            "config_hash": chash,
            "epochs_completed": end_epoch,
            "finished": finished,
            "best_acc": best_acc,
            "best_epoch": best_epoch,
            "last_acc": record.val_acc_clean if record is not None else None,
            "gap": (best_acc - record.val_acc_clean) if record is not None else None,
            "last_corrupted_subset_acc": record.corrupted_subset_acc if record is not None else None,
        }
        if finished:
            with open(out_dir / "summary.json", "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return summary


def _load_ckpt_state(exp: Experiment, arrays: dict):
    params = {k: v for k, v in arrays.items() if not k.startswith("velocity.")}
    exp.models.load_state_arrays(params)
    for name in exp.optimizer.velocities:
        key = f"velocity.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing optimizer state for {name!r}")
        exp.optimizer.velocities[name] = arrays[key].copy()
    # rebind parameter tensors (load_state_arrays replaced .data in place)
    exp.optimizer.params = exp.models.parameters()


def ablation_row_config(base_cfg: dict, row: str) -> dict:
    """Derive one grid row from the base config.

    Rows without the bootstrap component still train the classifier with a
    plain cross-entropy, expressed as the bootstrap loss pinned to alpha=1.
    """
    rows = {name: (a, b, c) for name, a, b, c in ABLATION_ROWS}
    if row not in rows:
        raise ValueError(f"unknown ablation row: {row!r}")
    use_a, use_b, use_c = rows[row]
    cfg = dict(base_cfg)
    cfg["losses.A"] = True
    cfg["losses.B"] = use_b
    cfg["losses.C"] = use_c
    if not use_a:
        cfg["alpha.kind"] = "constant"
        cfg["alpha.constant"] = 1.0
    return config_mod.validate(cfg)


def run_ablation(base_cfg: dict, out_dir) -> list:
    """Run the 7-row component grid with shared seeds.

    Returns a list of row result dicts; a failing row is reported and does
    not affect the others. Writes ``ablation.csv`` next to the row run
    directories.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_cfg = config_mod.validate(dict(base_cfg))
    results = []
    for name, *_ in ABLATION_ROWS:
        row_cfg = ablation_row_config(base_cfg, name)
        row_dir = out_dir / ("CE" if name == "CE" else name.replace("+", ""))
        try:
            summary = run_experiment(row_cfg, row_dir)
            results.append({
                "row": name,
                "status": "ok",
                "best_acc": summary["best_acc"],
                "best_epoch": summary["best_epoch"],
                "last_acc": summary["last_acc"],
                "gap": summary["gap"],
                "seeds": (base_cfg["seeds.init"], base_cfg["seeds.data"], base_cfg["seeds.augment"]),
            })
        except (DivergenceError, RunLockError, CheckpointError) as exc:
            results.append({"row": name, "status": f"failed: {exc}", "best_acc": None,
                            "best_epoch": None, "last_acc": None, "gap": None,
                            "seeds": (base_cfg["seeds.init"], base_cfg["seeds.data"], base_cfg["seeds.augment"])})
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fh.write("row,status,best_acc,best_epoch,last_acc,gap,seed_init,seed_data,seed_augment\n")
        for r in results:
            fh.write(",".join([
                r["row"], r["status"].split(":")[0],
                "" if r["best_acc"] is None else repr(r["best_acc"]),
                "" if r["best_epoch"] is None else str(r["best_epoch"]),
                "" if r["last_acc"] is None else repr(r["last_acc"]),
                "" if r["gap"] is None else repr(r["gap"]),
                str(r["seeds"][0]), str(r["seeds"][1]), str(r["seeds"][2]),
            ]) + "\n")
    return results


def format_ablation_table(results: list) -> str:
    lines = [f"{'row':8s} {'status':8s} {'best':>8s} {'last':>8s} {'gap':>8s}"]
    for r in results:
        best = "-" if r["best_acc"] is None else f"{r['best_acc']:.4f}"
        last = "-" if r["last_acc"] is None else f"{r['last_acc']:.4f}"
        gap = "-" if r["gap"] is None else f"{r['gap']:.4f}"
        lines.append(f"{r['row']:8s} {r['status'].split(':')[0]:8s} {best:>8s} {last:>8s} {gap:>8s}")
    return "\n".join(lines)
