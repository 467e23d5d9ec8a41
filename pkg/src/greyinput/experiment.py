"""Experiment plumbing: configs, dataset loading, training runs, grids and evaluation."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import synth
from .compose import compose, parse_config
from .descriptors import CODES, N_CLASSES
from .errors import CompatibilityError, DataError, GreyInputError, ParameterError
from .layers import PREPROC_KINDS, Model, ModelSpec, PreprocSpec, load_checkpoint, save_checkpoint
from .losses import LOSSES
from .metrics import ConfusionMatrix, macro_prauc, write_per_class_csv
from .optim import LogRow, PhasePlan, predict_data, run_two_phase, write_log_csv
from .pgm import read_pgm_uint8
from .resample import PRESETS, RESIZE_MODES, ResizePolicy, parse_target
from .tensor import DTYPES, default_dtype

log = logging.getLogger(__name__)

MODE_ALIASES = {"aspect": "aspect_pad", "aspect_pad": "aspect_pad", "squish": "squish"}
DEFAULT_TARGET = {"aspect_pad": "352x144", "squish": "224x224"}
CONFIG_SECTION = "experiment"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""  # dataset directory holding manifest.csv; empty -> generate
    gen_n: int = 2000
    gen_seed: int = 0
    channels: str = "B-H-N"
    preproc: str = "inc_d"
    loss: str = "bce"
    resize_mode: str = "aspect"
    target: str = ""  # empty -> preset for the mode
    epochs_frozen: int = 10
    epochs_finetune: int = 40
    lr_frozen: float = 1e-3
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    weight_decay: float = 0.1
    batch_size: int = 32
    bn_batches: int = 8
    dtype: str = "float32"
    val_fraction: float = 0.1
    backbone_channels: str = "16,32,64,128"
    branch_width: int = 8
    head_hidden: int = 512
    seed: int = 0
    out: str = "runs/run"

    def __post_init__(self):
        parse_config(self.channels)
        if self.preproc not in PREPROC_KINDS:
            raise ParameterError(f"unknown preproc {self.preproc!r}; expected one of {', '.join(PREPROC_KINDS)}")
        if self.loss not in LOSSES:
            raise ParameterError(f"unknown loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        if self.resize_mode not in MODE_ALIASES:
            raise ParameterError(f"unknown resize mode {self.resize_mode!r}; expected squish or aspect")
        if self.target:
            parse_target(self.target)
        if not 0 < self.val_fraction < 1:
            raise ParameterError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.gen_n < 1 and not self.data:
            raise ParameterError("gen_n must be >= 1 when no dataset is given")
        self.plan()  # validates epochs and learning rates
        self.model_spec()

    @property
    def mode(self) -> str:
        return MODE_ALIASES[self.resize_mode]

    def policy(self) -> ResizePolicy:
        h, w = parse_target(self.target or DEFAULT_TARGET[self.mode])
        return ResizePolicy(h, w, self.mode)

    @property
    def resolution(self) -> str:
        p = self.policy()
        return f"{p.target_h}x{p.target_w}"

    def plan(self) -> PhasePlan:
        return PhasePlan(self.epochs_frozen, self.epochs_finetune, self.lr_frozen,
                         (self.lr_min, self.lr_max), self.weight_decay, self.batch_size, self.bn_batches, self.dtype)

    def model_spec(self) -> ModelSpec:
        try:
            channels = tuple(int(c) for c in self.backbone_channels.split(","))
        except ValueError:
            raise ParameterError(f"backbone_channels must be comma-separated ints, got {self.backbone_channels!r}")
        return ModelSpec(PreprocSpec(self.preproc, self.branch_width), channels, self.head_hidden)

    # -- serialisation ------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp[CONFIG_SECTION] = {f.name: repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                              else str(getattr(self, f.name)) for f in fields(self)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ParameterError(f"unknown config key {key!r}")
            if raw is None:
                continue
            kind = type(getattr(base, name))
            try:
                out[name] = kind(raw) if kind is not str else str(raw)
            except ValueError:
                raise ParameterError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}")
        return replace(base, **out)

    @classmethod
    def from_ini(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ParameterError(f"{path}: {exc}") from exc
        if CONFIG_SECTION not in cp:
            raise ParameterError(f"{path}: missing [{CONFIG_SECTION}] section")
        return cls.from_mapping(dict(cp[CONFIG_SECTION]), base)


# ---------------------------------------------------------------------------
# data


@dataclass
class LabelledImages:
    """Source images (uint8) with label vectors and file names."""

    pixels: list
    labels: np.ndarray
    names: list

    def __len__(self):
        return len(self.pixels)


def load_dataset(directory) -> LabelledImages:
    directory = Path(directory)
    rows = synth.read_manifest(directory / "manifest.csv")
    if not rows:
        raise DataError(f"{directory}: manifest lists no images")
    pixels = [read_pgm_uint8(directory / name) for name, _, _ in rows]
    labels = np.stack([synth.to_vector(codes) for _, codes, _ in rows])
    return LabelledImages(pixels, labels, [name for name, _, _ in rows])


def from_synthetic(ds: synth.SyntheticDataset) -> LabelledImages:
    return LabelledImages([s.pixels for s in ds.samples], np.stack([s.label_vector for s in ds.samples]),
                          [s.filename for s in ds.samples])


_DATA_CACHE: dict = {}


def resolve_dataset(cfg: ExperimentConfig) -> LabelledImages:
    """The configured dataset, generated in memory when no path is given."""
    key = ("dir", str(Path(cfg.data).resolve())) if cfg.data else ("gen", cfg.gen_n, cfg.gen_seed)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        if cfg.data:
            _DATA_CACHE[key] = load_dataset(cfg.data)
        else:
            _DATA_CACHE[key] = from_synthetic(synth.generate_dataset(cfg.gen_n, cfg.gen_seed))
    return _DATA_CACHE[key]


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``round(n * val_fraction)`` go to validation."""
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 2:
        raise DataError(f"{n} images are too few for a {val_fraction:.0%} validation split")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B17])).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class ComposedData:
    """Train/validation views that compose every image once and keep the
    three-channel inputs as float32 (ample for 8-bit sources).  Batches are
    handed out as float32; tensors convert them to the compute dtype."""

    def __init__(self, images: LabelledImages, train_idx, val_idx, channels: str, policy: ResizePolicy):
        self.cfg = parse_config(channels)
        self.policy = policy
        self.train_idx, self.val_idx = np.asarray(train_idx), np.asarray(val_idx)
        self.names = images.names
        self.x_train = self._compose(images, self.train_idx)
        self.x_val = self._compose(images, self.val_idx)
        self.y_train = images.labels[self.train_idx]
        self.y_val = images.labels[self.val_idx]

    def _compose(self, images, idx):
        out = np.empty((len(idx), 3, self.policy.target_h, self.policy.target_w), dtype=np.float32)
        for k, i in enumerate(idx):
            out[k] = compose(images.pixels[i] / 255.0, self.cfg, self.policy)
        return out

    @property
    def n_train(self):
        return len(self.train_idx)

    @property
    def n_val(self):
        return len(self.val_idx)

    def train_batch(self, idx):
        return self.x_train[idx], self.y_train[idx]

    def val_batch(self, idx):
        return self.x_val[idx], self.y_val[idx]

    def train_label_counts(self):
        return self.y_train.sum(axis=0)


def build_data(cfg: ExperimentConfig, images: LabelledImages | None = None) -> ComposedData:
    images = images if images is not None else resolve_dataset(cfg)
    train_idx, val_idx = split_indices(len(images), cfg.seed, cfg.val_fraction)
    return ComposedData(images, train_idx, val_idx, cfg.channels, cfg.policy())


# ---------------------------------------------------------------------------
# training runs


@dataclass
class RunResult:
    out: Path
    macro_prauc: float
    per_class: np.ndarray
    log: list
    wall_seconds: float


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def _evaluate(model: Model, data: ComposedData, cfg: ExperimentConfig):
    """Validation scores computed in the training dtype, so they match the
    last logged epoch exactly."""
    model.cast(DTYPES[cfg.dtype])
    try:
        with default_dtype(cfg.dtype):
            scores, labels = predict_data(model, data, cfg.batch_size)
    finally:
        model.cast(np.float64)
    result = macro_prauc(scores, labels)
    cm = ConfusionMatrix()
    cm.update_batch(labels, scores)
    return scores, labels, result, cm


def train_run(cfg: ExperimentConfig, images: LabelledImages | None = None, progress=None) -> RunResult:
    """Compose, build and train one model; write the run directory.

    A file named INCOMPLETE marks the directory until every output exists.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("run started; outputs are partial\n")
    _write_text(out / "config.ini", cfg.to_ini())
    start = time.perf_counter()
    try:
        data = build_data(cfg, images)
        model = Model(cfg.model_spec(), cfg.seed)
        rows = run_two_phase(model, data, cfg.plan(), cfg.loss, seed=cfg.seed, on_epoch=progress)
        write_log_csv(out / "train_log.csv", rows)
        _, _, result, cm = _evaluate(model, data, cfg)
        write_per_class_csv(out / "per_class_prauc.csv", result.per_class)
        cm.to_csv(out / "confusion.csv")
        # the output path is left out so identical runs give identical bytes
        snapshot = replace(cfg, out="").to_ini()
        save_checkpoint(out / "checkpoint.npz", model, {"config": snapshot, "macro_prauc": result.macro})
    except GreyInputError as exc:
        raise type(exc)(f"run {out}: {exc}") from exc
    wall = time.perf_counter() - start
    summary = {"macro_prauc": result.macro, "excluded": result.excluded, "epochs": len(rows),
               "trainable_preproc_parameters": model.preproc.num_parameters()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    marker.unlink()
    return RunResult(out, result.macro, result.per_class, rows, wall)


# ---------------------------------------------------------------------------
# evaluation


def per_sample_bce(scores: np.ndarray, labels: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    p = np.clip(scores, eps, 1 - eps)
    return -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p), axis=1)


def eval_run(checkpoint, out_dir, data_dir: str | None = None, split: str = "val", top_k: int = 10) -> dict:
    """Score a checkpoint on its run's validation split (or the whole dataset)."""
    model, meta = load_checkpoint(checkpoint)
    if model.spec.n_classes != N_CLASSES:
        raise CompatibilityError(f"checkpoint predicts {model.spec.n_classes} classes; datasets have {N_CLASSES}")
    cp = configparser.ConfigParser()
    cp.read_string(meta["extra"]["config"])
    cfg = ExperimentConfig.from_mapping(dict(cp[CONFIG_SECTION]))
    if data_dir:
        cfg = replace(cfg, data=str(data_dir))
    images = resolve_dataset(cfg)
    if images.labels.shape[1] != model.spec.n_classes:
        raise CompatibilityError(f"dataset has {images.labels.shape[1]} classes, checkpoint {model.spec.n_classes}")
    if split == "val":
        data = build_data(cfg, images)
    elif split == "all":
        idx = np.arange(len(images))
        data = ComposedData(images, idx[:0], idx, cfg.channels, cfg.policy())
    else:
        raise ParameterError(f"split must be 'val' or 'all', got {split!r}")
    scores, labels, result, cm = _evaluate(model, data, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_per_class_csv(out / "per_class_prauc.csv", result.per_class)
    cm.to_csv(out / "confusion.csv")
    losses = per_sample_bce(scores, labels)
    order = np.argsort(-losses, kind="stable")[:top_k]
    with open(out / "highest_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "loss", "labels", "top_predictions"])
        for i in order:
            truth = ";".join(c for c, v in zip(CODES, labels[i]) if v)
            top = ";".join(CODES[j] for j in np.argsort(-scores[i], kind="stable")[:3])
            w.writerow([data.names[data.val_idx[i]], repr(float(losses[i])), truth, top])
    metrics = {"macro_prauc": result.macro, "excluded": result.excluded, "n_images": int(len(labels)),
               "per_class": {c: (None if np.isnan(v) else float(v)) for c, v in zip(CODES, result.per_class)}}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# grids

RAW_FIELDS = ("channels", "preproc", "loss", "resolution", "repeat", "seed", "macro_prauc", "wall_seconds",
              "status", *CODES)


@dataclass(frozen=True)
class Resolution:
    target: str
    mode: str

    @classmethod
    def parse(cls, token: str) -> "Resolution":
        """``352x144``, ``352x144:aspect`` or ``224x224:squish``; presets imply the mode."""
        target, _, mode = token.partition(":")
        h, w = parse_target(target)
        label = f"{h}x{w}"
        if not mode:
            if label not in PRESETS:
                raise ParameterError(f"resolution {token!r} needs a mode suffix (:aspect or :squish)")
            mode = PRESETS[label].mode
        if mode not in MODE_ALIASES:
            raise ParameterError(f"unknown resize mode {mode!r} in {token!r}")
        return cls(label, MODE_ALIASES[mode])

    @property
    def label(self) -> str:
        return f"{self.target}:{'aspect' if self.mode == 'aspect_pad' else 'squish'}"


def derive_seed(base: int, repeat: int) -> int:
    return int(np.random.SeedSequence([int(base), 0x6121D, int(repeat)]).generate_state(1)[0] % (2**31))


def run_grid(base: ExperimentConfig, channels, preprocs, losses, resolutions, repeats: int, out_dir,
             runner=None, progress=None) -> dict:
    """Train every cell of the grid ``repeats`` times and write the tables.

    Repeat ``r`` uses the same derived seed in every cell, so cells are
    compared on identical splits and initialisations.  ``runner`` replaces
    :func:`train_run` (it receives the run config and returns a RunResult).
    """
    resolutions = [r if isinstance(r, Resolution) else Resolution.parse(r) for r in resolutions]
    for name, values in (("channels", channels), ("preproc", preprocs), ("loss", losses),
                         ("resolution", resolutions)):
        if not values:
            raise ParameterError(f"grid axis {name} is empty")
    if repeats < 1:
        raise ParameterError(f"repeats must be >= 1, got {repeats}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = runner or train_run
    images = None if runner is not train_run else resolve_dataset(base)
    rows = []
    for ch, pp, loss, res, rep in product(channels, preprocs, losses, resolutions, range(repeats)):
        seed = derive_seed(base.seed, rep)
        cell = f"{ch}_{pp}_{loss}_{res.target}-{res.mode}_r{rep}"
        cfg = replace(base, channels=ch, preproc=pp, loss=loss, target=res.target,
                      resize_mode=res.mode, seed=seed, out=str(out / "runs" / cell))
        row = {"channels": ch, "preproc": pp, "loss": loss, "resolution": res.label, "repeat": rep,
               "seed": seed}
        try:
            result = runner(cfg, images) if runner is train_run else runner(cfg)
            row.update(macro_prauc=result.macro_prauc, wall_seconds=result.wall_seconds, status="ok",
                       per_class=list(result.per_class))
        except Exception as exc:  # a failed cell is recorded and the grid moves on
            log.error("grid cell %s failed: %s", cell, exc)
            row.update(macro_prauc=float("nan"), wall_seconds=float("nan"), status=f"failed: {exc}",
                       per_class=[float("nan")] * N_CLASSES)
        rows.append(row)
        if progress is not None:
            progress(row)
    write_raw_rows(out / "grid_runs.csv", rows)
    tables = summarise_grid(rows, [r.label for r in resolutions])
    write_tables(out, tables)
    return {"rows": rows, **tables}


def write_raw_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_FIELDS)
        for r in rows:
            w.writerow([r["channels"], r["preproc"], r["loss"], r["resolution"], r["repeat"], r["seed"],
                        repr(float(r["macro_prauc"])), f"{r['wall_seconds']:.3f}", r["status"],
                        *(repr(float(v)) for v in r["per_class"])])


def read_raw_rows(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({"channels": rec["channels"], "preproc": rec["preproc"], "loss": rec["loss"],
                         "resolution": rec["resolution"], "repeat": int(rec["repeat"]),
                         "seed": int(rec["seed"]), "macro_prauc": float(rec["macro_prauc"]),
                         "wall_seconds": float(rec["wall_seconds"]), "status": rec["status"],
                         "per_class": [float(rec[c]) for c in CODES]})
    return rows


def _mean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _delta_columns(resolutions: list[str]) -> tuple[str, str] | None:
    """(aspect, squish) resolution labels for the difference column, if present."""
    aspect = [r for r in resolutions if r.endswith(":aspect")]
    squish = [r for r in resolutions if r.endswith(":squish")]
    return (aspect[0], squish[0]) if aspect and squish else None


def summarise_grid(rows: list[dict], resolutions: list[str]) -> dict:
    """Cell means over repeats (one row per channels x preproc x loss, one
    column per resolution, plus the aspect minus squish difference) and
    marginal means over preprocessing kinds and over channel configs."""
    ok = [r for r in rows if r["status"] == "ok"]
    keys = list(dict.fromkeys((r["channels"], r["preproc"], r["loss"]) for r in rows))
    delta = _delta_columns(resolutions)
    table = []
    for ch, pp, loss in keys:
        entry = {"channels": ch, "preproc": pp, "loss": loss}
        for res in resolutions:
            entry[res] = _mean(r["macro_prauc"] for r in ok
                               if (r["channels"], r["preproc"], r["loss"], r["resolution"]) == (ch, pp, loss, res))
        if delta:
            entry["delta"] = entry[delta[0]] - entry[delta[1]]
        table.append(entry)

    def marginal(axis: str) -> list[dict]:
        out = []
        for value in dict.fromkeys(e[axis] for e in table):
            for loss in dict.fromkeys(e["loss"] for e in table):
                group = [e for e in table if e[axis] == value and e["loss"] == loss]
                entry = {axis: value, "loss": loss}
                for res in resolutions:
                    entry[res] = _mean(e[res] for e in group)
                if delta:
                    entry["delta"] = entry[delta[0]] - entry[delta[1]]
                out.append(entry)
        return out

    return {"table": table, "by_channels": marginal("channels"), "by_preproc": marginal("preproc"),
            "resolutions": resolutions, "has_delta": bool(delta)}


def write_tables(out: Path, tables: dict) -> None:
    res = tables["resolutions"]
    extra = ["delta"] if tables["has_delta"] else []

    def dump(path, rows, keys):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*keys, *res, *extra])
            for r in rows:
                w.writerow([*(r[k] for k in keys), *(repr(float(r[c])) for c in [*res, *extra])])

    dump(out / "grid_table.csv", tables["table"], ["channels", "preproc", "loss"])
    dump(out / "marginal_by_channels.csv", tables["by_channels"], ["channels", "loss"])
    dump(out / "marginal_by_preproc.csv", tables["by_preproc"], ["preproc", "loss"])
