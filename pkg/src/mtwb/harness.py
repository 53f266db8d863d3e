"""Experiment runner: data, training, evaluation, results and manifests.

A run owns its output directory through a lockfile.  While it executes, a
``PARTIAL`` marker sits next to the outputs and is removed only on success,
so an interrupted run is recognizable.  Every run writes ``results.csv``
(fixed header), ``manifest.json`` (config echo, content hashes, environment
fingerprint) and binary checkpoints under ``checkpoints/``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
import traceback
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import ce as ce_mod
from . import csi as csi_mod
from . import hbf as hbf_mod
from .baselines import (
    MLPFeedback, angular_dictionary, fully_digital_precoder, somp_estimate, ss_hp,
)
from .channel import ChannelConfig, awgn, nmse_db
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .dataset import gen_dataset, read_dataset
from .errors import ConfigError
from .tensor import Tensor

log = logging.getLogger(__name__)

RESULT_HEADER = ("scheme", "coordinate", "metric", "value", "preset", "seed", "seconds", "params", "flops")
CONFIG_RECORD = "__config__"
SPLITS = ("train", "val", "test")


class RunLockedError(RuntimeError):
    pass


@dataclass
class ResultRecord:
    scheme: str
    coordinate: float
    metric: str
    value: float
    preset: str
    seed: int
    seconds: float
    params: int
    flops: int


# ---------------------------------------------------------------- files


def _fmt(x):
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def write_results(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RESULT_HEADER])
    return path


def read_results(path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != RESULT_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRecord(row[0], float(row[1]), row[2], float(row[3]), row[4], int(row[5]), float(row[6]),
                             int(row[7]), int(row[8])) for row in reader]


def sort_records(records):
    return sorted(records, key=lambda r: (r.scheme, r.coordinate))


def blob_hash(data: bytes) -> str:
    """Git-style object id: sha1 over ``"blob <len>\\0" + data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def source_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha1()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode() + b"\0" + blob_hash(p.read_bytes()).encode())
    return h.hexdigest()


def environment_fingerprint() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__, "mtwb": __version__,
            "platform": platform.platform(), "machine": platform.machine(), "byteorder": sys.byteorder,
            "source_hash": source_hash()}


def _config_array(cfg: ExperimentConfig) -> np.ndarray:
    return np.frombuffer(cfg.canonical_json().encode(), dtype=np.uint8).astype(np.float64)


def save_model(path, params: dict, cfg: ExperimentConfig) -> None:
    """Checkpoint ``params`` with the run config echoed as a byte record."""
    arrays = {k: v.data for k, v in params.items()}
    arrays[CONFIG_RECORD] = _config_array(cfg)
    save_checkpoint(path, arrays)


def checkpoint_config(path) -> dict:
    raw = load_checkpoint(path)[CONFIG_RECORD]
    return json.loads(raw.astype(np.uint8).tobytes().decode())


def load_model(path, params: dict) -> None:
    stored = load_checkpoint(path)
    missing = set(params) - set(stored)
    if missing:
        raise ConfigError(f"{path} lacks parameters {sorted(missing)[:3]}", "checkpoint")
    for k, v in params.items():
        if stored[k].shape != v.shape:
            raise ConfigError(f"{path}: {k} has shape {stored[k].shape}, model expects {v.shape}", "checkpoint")
        v.assign(stored[k])


@contextmanager
def run_directory(out):
    """Lock ``out`` for one run; leave ``PARTIAL`` behind if the body raises."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    marker = out / "PARTIAL"
    marker.write_text("run in progress\n")
    try:
        yield out
    except BaseException:
        marker.write_text("run failed\n" + traceback.format_exc())
        raise
    else:
        marker.unlink()
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------- data


def split_seed(seed: int, split: str) -> int:
    return (seed + SPLITS.index(split)) % 2 ** 64


def prepare_data(cfg: ExperimentConfig, out) -> dict:
    """Load or generate the train/val/test splits; returns ``{split: (H, path)}``."""
    base = Path(cfg.data["dir"]) if cfg.data.get("dir") else Path(out) / "data"
    base.mkdir(parents=True, exist_ok=True)
    result = {}
    for split in SPLITS:
        count = cfg.data[f"n_{split}"]
        path = base / f"{split}.mtwc"
        seed = split_seed(cfg.seed, split)
        if path.exists():
            ds = read_dataset(path, expect_config=cfg.channel)
            if len(ds) != count or ds.seed != seed:
                raise ConfigError(f"{path} holds {len(ds)} samples with seed {ds.seed}, "
                                  f"config wants {count} with seed {seed}", f"data.n_{split}")
            H = ds.H
        else:
            gen_dataset(cfg.channel, count, seed, path)
            H = read_dataset(path).H
        result[split] = (H, path)
    return result


# ---------------------------------------------------------------- timing


def runtime_per_sample(fn, repeats=100, warmup=5) -> float:
    """Median wall-clock seconds of ``fn()`` over ``repeats`` calls after warm-up."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


# ---------------------------------------------------------------- baselines: shape algebra


def somp_flops(config: ChannelConfig, n_pilots, dictionary_size, sparsity) -> int:
    """Real MACs: correlation of every atom with all ``K`` residuals per step, plus the final synthesis."""
    K, nt = config.n_subcarriers, config.n_antennas
    return 4 * (sparsity * dictionary_size * n_pilots * K + nt * sparsity * K)


def zf_flops(config: ChannelConfig, n_users) -> int:
    K, nt, U = config.n_subcarriers, config.n_antennas, n_users
    return 4 * K * (U * U * nt + U ** 3 + nt * U * U)


def sshp_flops(config: ChannelConfig, n_users, dictionary_size, n_rf) -> int:
    K, nt, U = config.n_subcarriers, config.n_antennas, n_users
    return zf_flops(config, U) + 4 * (n_rf * dictionary_size * nt * K * U + K * nt * n_rf * U)


# ---------------------------------------------------------------- pipelines


class Runner:
    """Executes one pipeline for one config inside an output directory."""

    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.ckpt = self.out / "checkpoints"
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.runtime: dict = {}
        self.histories: dict = {}
        self.data = None

    def record(self, scheme, coordinate, metric, value, seconds, params, flops):
        return ResultRecord(scheme, float(coordinate), metric, float(value), self.cfg.preset, self.cfg.seed,
                            round(float(seconds), 3), int(params), int(flops))

    def load_data(self):
        if self.data is None:
            self.data = prepare_data(self.cfg, self.out)
        return {k: v[0] for k, v in self.data.items()}

    @property
    def model_name(self):
        return f"Transformer-{self.cfg.model['preset']}"

    def _overrides(self):
        return dict(self.cfg.model.get("overrides", {}))

    def _fit_or_load(self, name, params, train_fn, train):
        path = self.ckpt / f"{name}.ckpt"
        t = time.perf_counter()
        if train:
            result = train_fn()
            self.histories[name] = {"best_epoch": result.best_epoch, "history": result.history}
            save_model(path, params, self.cfg)
        else:
            if not path.exists():
                raise ConfigError(f"no checkpoint {path}; run the matching *-train command first", "out")
            load_model(path, params)
        return time.perf_counter() - t

    # -- channel estimation
    def run_ce(self, train=True):
        cfg, data = self.cfg, self.load_data()
        c = cfg.ce
        model = ce_mod.init_ce(cfg.channel, cfg.model["preset"], c["pilot_ratio"], cfg.seed, **self._overrides())
        seconds = self._fit_or_load("ce", model.params, lambda: ce_mod.train_ce(
            data["train"], data["val"], model, cfg.train_config("ce"), val_snr=c["val_snr_db"]), train)
        test = data["test"]
        flops = ce_mod.ce_flops(model)
        records = []
        for snr in c["snr_db"]:
            t = time.perf_counter()
            value = ce_mod.evaluate_ce(model, test, snr, seed=cfg.seed)
            records.append(self.record(self.model_name, snr, "nmse_db", value, seconds + time.perf_counter() - t,
                                       model.param_count(), flops))
        rng = np.random.default_rng(0)
        self.runtime[self.model_name] = runtime_per_sample(lambda: ce_mod.predict(test[:1], model, 10.0, rng))
        if "somp" in c.get("baselines", []):
            records += self._somp(model.n_pilots, test)
        return records

    def _somp(self, n_pilots, test):
        cfg, c = self.cfg, self.cfg.ce
        dictionary = angular_dictionary(cfg.channel, c["oversampling"])
        sparsity = c["somp_sparsity"] or min(cfg.channel.n_clusters, n_pilots)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
        nt = cfg.channel.n_antennas
        A = rng.standard_normal((n_pilots, nt)) + 1j * rng.standard_normal((n_pilots, nt))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        flops = somp_flops(cfg.channel, n_pilots, dictionary.size, sparsity)
        records = []
        for snr in c["snr_db"]:
            t = time.perf_counter()
            noise_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
            Y = awgn(test @ A.T, snr, noise_rng, batched=True)
            est = np.stack([somp_estimate(y, A, dictionary, sparsity) for y in Y])
            records.append(self.record("SOMP", snr, "nmse_db", nmse_db(est, test), time.perf_counter() - t, 0, flops))
        Y1 = test[:1] @ A.T
        self.runtime["SOMP"] = runtime_per_sample(lambda: somp_estimate(Y1[0], A, dictionary, sparsity))
        return records

    # -- CSI feedback
    def csi_models(self, bits):
        cfg, c = self.cfg, self.cfg.csi
        B = c["bits_per_entry"]
        models = {self.model_name: csi_mod.TransformerFeedback(cfg.channel, bits // B, B, cfg.model["preset"],
                                                              cfg.seed, **self._overrides())}
        if "mlp" in c.get("baselines", []):
            models["MLP"] = MLPFeedback(cfg.channel, bits // B, B, seed=cfg.seed)
        return models

    def run_csi(self, train=True, grid=None):
        cfg, data = self.cfg, self.load_data()
        records = []
        for bits in grid or cfg.csi["feedback_bits"]:
            for scheme, model in self.csi_models(bits).items():
                seconds = self._fit_or_load(f"csi-{scheme}-{bits}", model.params, lambda: csi_mod.train_csi(
                    data["train"], data["val"], model, cfg.train_config("csi")), train)
                value = csi_mod.evaluate_csi(model, data["test"])
                records.append(self.record(scheme, bits, "nmse_db", value, seconds, model.param_count(), model.flops()))
                self.runtime[f"{scheme}@{bits}"] = runtime_per_sample(
                    lambda: csi_mod.reconstruct(data["test"][:1], model))
        return records

    # -- hybrid beamforming
    def run_hbf(self, train=True, grid=None):
        cfg, data = self.cfg, self.load_data()
        h = cfg.hbf
        U, noise = h["n_users"], h["noise_power"]
        split = {k: hbf_mod.user_channels(v, U) for k, v in data.items()}
        grid = list(grid or h["feedback_bits"])
        common = dict(n_users=U, preset=cfg.model["preset"], bits_per_entry=h["bits_per_entry"], seed=cfg.seed,
                      **self._overrides())
        records = []

        def trained(name, model):
            seconds = self._fit_or_load(name, model.params, lambda: hbf_mod.train_hbf(
                split["train"], split["val"], model, cfg.train_config("hbf"), noise), train)
            self.runtime[name] = runtime_per_sample(lambda: hbf_mod.hbf_forward(split["test"][:1], model))
            return seconds, hbf_mod.evaluate_hbf(model, split["test"], noise)

        perfect = hbf_mod.HBFModel(cfg.channel, mode=1, **common)
        seconds, rate = trained("hbf-mode1", perfect)
        for bits in grid:
            records.append(self.record(f"HBF-{self.model_name}-perfect", bits, "sum_rate", rate, seconds,
                                       perfect.param_count(), perfect.flops()))
        for bits in grid:
            model = hbf_mod.HBFModel(cfg.channel, mode=2, feedback_bits=bits, **common)
            seconds, rate = trained(f"hbf-mode2-{bits}", model)
            records.append(self.record(f"HBF-{self.model_name}-feedback", bits, "sum_rate", rate, seconds,
                                       model.param_count(), model.flops()))
        baselines = h.get("baselines", [])
        if baselines:
            t = time.perf_counter()
            dictionary = angular_dictionary(cfg.channel, h["oversampling"])
            zf, sshp = [], []
            for ch in split["test"]:
                F_opt = fully_digital_precoder(ch)
                zf.append(hbf_mod.sum_rate_precoder(ch, F_opt, noise).item())
                if "ss-hp" in baselines:
                    sshp.append(hbf_mod.sum_rate(ch, *ss_hp(F_opt, dictionary, U), noise).item())
            seconds = time.perf_counter() - t
            for bits in grid:
                if "zf" in baselines:
                    records.append(self.record("ZF-perfect", bits, "sum_rate", np.mean(zf), seconds, 0,
                                               zf_flops(cfg.channel, U)))
                if "ss-hp" in baselines:
                    records.append(self.record("SS-HP-perfect", bits, "sum_rate", np.mean(sshp), seconds, 0,
                                               sshp_flops(cfg.channel, U, dictionary.size, U)))
        return records


COMMANDS = {
    "ce-train": ("ce", True), "ce-eval": ("ce", False), "csi-train": ("csi", True), "csi-eval": ("csi", False),
    "hbf-train": ("hbf", True), "hbf-eval": ("hbf", False),
}


def _manifest(cfg: ExperimentConfig, command, out: Path, runner: Runner, files, extra=None) -> dict:
    data = {}
    if runner.data is not None:
        for split, (_, path) in runner.data.items():
            data[split] = {"path": str(path), "seed": split_seed(cfg.seed, split),
                           "channel": cfg.channel.to_dict(), "blob": blob_hash(Path(path).read_bytes())}
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": blob_hash(cfg.canonical_json().encode()),
        "environment": environment_fingerprint(),
        "datasets": data,
        "checkpoints": {p.name: blob_hash(p.read_bytes()) for p in sorted(runner.ckpt.glob("*.ckpt"))},
        "outputs": {name: blob_hash((out / name).read_bytes()) for name in files},
        "runtime_per_sample_s": runner.runtime,
        "training": runner.histories,
    }
    manifest.update(extra or {})
    return manifest


def run(cfg: ExperimentConfig, command: str, out=None) -> list[ResultRecord]:
    """Execute one pipeline command and write results plus manifest."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", "command")
    pipeline, train = COMMANDS[command]
    out = Path(out or cfg.out or f"runs/{pipeline}-{cfg.seed}")
    if cfg.pipeline != pipeline:
        cfg = _with(cfg, pipeline=pipeline)
    with run_directory(out):
        runner = Runner(cfg, out)
        records = sort_records(getattr(runner, f"run_{pipeline}")(train=train))
        write_results(out / "results.csv", records)
        manifest = _manifest(cfg, command, out, runner, ["results.csv"])
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return records


def _with(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    from .config import validate

    d = cfg.to_dict()
    d["out"] = cfg.out
    for key, value in changes.items():
        section, _, name = key.rpartition(".")
        (d[section] if section else d)[name] = value
    return validate(d)


def generate_data(cfg: ExperimentConfig, out=None) -> dict:
    out = Path(out or cfg.out or "runs/data")
    with run_directory(out):
        runner = Runner(cfg, out)
        runner.load_data()
        manifest = _manifest(cfg, "gen-data", out, runner, [])
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest["datasets"]


def sweep(cfg: ExperimentConfig, axis: str, values, out=None) -> list[ResultRecord]:
    """Run or evaluate the configured pipeline at each grid value; merged CSV sorted by (scheme, coordinate).

    An SNR sweep evaluates one CE model (trained here unless a checkpoint is
    already present in ``out``); a bit sweep trains one model per budget.
    """
    values = list(values)
    if axis == "snr_db":
        if cfg.pipeline != "ce":
            raise ConfigError("snr_db sweeps apply to the ce pipeline", "axis")
        cfg = _with(cfg, **{"ce.snr_db": values})
    elif axis == "feedback_bits":
        if cfg.pipeline not in ("csi", "hbf"):
            raise ConfigError("feedback_bits sweeps apply to the csi and hbf pipelines", "axis")
        cfg = _with(cfg, **{f"{cfg.pipeline}.feedback_bits": values})
    else:
        raise ConfigError(f"axis must be snr_db or feedback_bits, got {axis!r}", "axis")
    out = Path(out or cfg.out or f"runs/sweep-{cfg.pipeline}-{cfg.seed}")
    with run_directory(out):
        runner = Runner(cfg, out)
        train = not (cfg.pipeline == "ce" and (runner.ckpt / "ce.ckpt").exists())
        records = sort_records(getattr(runner, f"run_{cfg.pipeline}")(train=train))
        write_results(out / "sweep.csv", records)
        manifest = _manifest(cfg, "sweep", out, runner, ["sweep.csv"], {"sweep": {"axis": axis, "values": values}})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return records


# ---------------------------------------------------------------- comparison

HIGHER_IS_BETTER = {"sum_rate": True, "nmse_db": False}


def compare(records) -> dict:
    """Per-coordinate ranking of schemes and the coordinates where the order changes.

    Records sharing (scheme, coordinate) across files or seeds are averaged.
    A crossover is reported at coordinate ``c`` for the pair ``(a, b)`` when
    their order at ``c`` differs from the order at the previous coordinate
    both were evaluated at.
    """
    metrics = {r.metric for r in records}
    if len(metrics) > 1:
        raise ValueError(f"cannot compare mixed metrics {sorted(metrics)}")
    if not records:
        return {"metric": None, "ranking": {}, "crossovers": []}
    metric = metrics.pop()
    sign = -1.0 if HIGHER_IS_BETTER.get(metric, False) else 1.0
    acc: dict = {}
    for r in records:
        acc.setdefault((r.scheme, r.coordinate), []).append(r.value)
    table: dict = {}
    for (scheme, coord), vals in acc.items():
        table.setdefault(coord, {})[scheme] = float(np.mean(vals))
    coords = sorted(table)
    ranking = {c: sorted(table[c], key=lambda s: (sign * table[c][s], s)) for c in coords}
    schemes = sorted({r.scheme for r in records})
    crossovers = []
    for i, a in enumerate(schemes):
        for b in schemes[i + 1:]:
            prev = None
            for c in coords:
                if a not in table[c] or b not in table[c]:
                    continue
                diff = table[c][a] - table[c][b]
                order = 0 if diff == 0 else (1 if sign * diff < 0 else -1)
                if prev is not None and order != 0 and prev != 0 and order != prev:
                    leader = a if order > 0 else b
                    crossovers.append({"coordinate": c, "schemes": [a, b], "leader_after": leader})
                if order != 0:
                    prev = order
    crossovers.sort(key=lambda x: (x["coordinate"], x["schemes"]))
    return {"metric": metric, "ranking": {repr(c): ranking[c] for c in coords}, "table": {repr(c): table[c] for c in coords},
            "crossovers": crossovers}


def format_comparison(result: dict) -> str:
    lines = [f"metric: {result['metric']}"]
    for coord, order in result["ranking"].items():
        vals = result["table"][coord]
        lines.append(f"{coord:>8}: " + "  >  ".join(f"{s} ({vals[s]:.4g})" for s in order))
    if result["crossovers"]:
        for x in result["crossovers"]:
            lines.append(f"crossover at {x['coordinate']:g}: {x['schemes'][0]} vs {x['schemes'][1]}, "
                         f"{x['leader_after']} leads from here")
    else:
        lines.append("no crossovers")
    return "\n".join(lines)


def record_dicts(records):
    return [asdict(r) for r in records]
