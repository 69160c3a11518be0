"""Experiment harness: config files, runs, sweeps, and the MAC cost model.

Experiments are described by INI files with five sections (all keys
optional; unknown keys are rejected so typos fail loudly)::

    [experiment]
    name = desk
    output_dir = runs/desk
    seed = 0

    [data]
    source = synthetic          ; or "idx"
    root = .                    ; idx: directory with the canonical files
    n_train = 10000             ; subset sizes (0 means "all")
    n_test = 2000
    synthetic_seed = 7
    synthetic_train = 12000     ; corpus sizes before subsetting
    synthetic_test = 2000

    [model]
    hidden_units = 200,200
    pieces = 2

    [optimizer]
    epochs = 20
    batch_size = 100
    lr_start = 0.2
    lr_end = 0.02
    lr_decay_epochs = 20
    momentum_start = 0.5
    momentum_saturate = 0.7
    momentum_saturate_epoch = 10
    max_norm = 2.5
    dropout_input = 0.2
    dropout_hidden = 0.5

    [precision]
    prop = exact                ; format descriptor
    update = exact
    dynamic = false
    max_overflow_rate = 0.0001
    period = 10000
    calibration_epochs = 1
    scales_file =               ; optional precomputed exponent table

When the ``LOWPREC_DATA`` environment variable is set, relative ``root``
paths resolve inside it.  A run writes ``log.csv``, ``exponents.csv``,
``summary.csv``, ``scales.tsv``, ``checkpoint.bin`` and a canonical echo
of its config into the output directory.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    load_mnist_dir,
    subset,
    synthesize_digits,
    to_dataset,
)
from .formats import ExactHost, FixedPoint, FloatEmu, QuantFormat, format_to_str, parse_format
from .network import MaxoutClassifier, save_checkpoint
from .scaling import ScaleGroup, read_exponent_file, write_exponent_file

__all__ = [
    "UserError",
    "DataConfig",
    "ModelConfig",
    "OptimizerConfig",
    "PrecisionConfig",
    "ExperimentConfig",
    "load_config",
    "dump_config",
    "resolve_dataset",
    "RunResult",
    "run",
    "sweep",
    "calibrate_run",
    "mac_cost",
    "format_bits",
    "format_family",
    "SWEEP_VARIABLES",
]

DATA_ROOT_ENV = "LOWPREC_DATA"


class UserError(Exception):
    """A problem the invoking user can fix (bad config, missing file)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    root: str = "."
    n_train: int = 10000
    n_test: int = 2000
    synthetic_seed: int = 7
    synthetic_train: int = 12000
    synthetic_test: int = 2000


@dataclass(frozen=True)
class ModelConfig:
    hidden_units: tuple[int, ...] = (200, 200)
    pieces: int = 2


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 20
    batch_size: int = 100
    lr_start: float = 0.2
    lr_end: float = 0.02
    lr_decay_epochs: int = 20
    momentum_start: float = 0.5
    momentum_saturate: float = 0.7
    momentum_saturate_epoch: int = 10
    max_norm: float = 2.5
    dropout_input: float = 0.2
    dropout_hidden: float = 0.5


@dataclass(frozen=True)
class PrecisionConfig:
    prop: str = "exact"
    update: str = "exact"
    dynamic: bool = False
    max_overflow_rate: float = 1e-4
    period: int = 10000
    calibration_epochs: int = 1
    scales_file: str = ""


# config file schema version; bump on incompatible key changes
CONFIG_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    version: int = CONFIG_VERSION
    output_dir: str = ""
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)

    @property
    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else Path("runs") / self.name


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is str:
            return raw
        if target_type == tuple[int, ...]:
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as err:
        raise UserError(f"bad value for {key}: {err}") from None
    raise UserError(f"unsupported config field type for {key}")


def _parse_section(parser: configparser.ConfigParser, section: str, cls):
    known = {f.name: f.type for f in fields(cls)}
    type_map = {
        "str": str, "int": int, "float": float, "bool": bool,
        "tuple[int, ...]": tuple[int, ...],
    }
    values = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in known:
                raise UserError(f"unknown key [{section}] {key}")
            values[key] = _coerce(raw, type_map[known[key]], f"[{section}] {key}")
    return cls(**values)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "precision": PrecisionConfig,
}
_EXPERIMENT_KEYS = {"name": str, "version": int, "output_dir": str, "seed": int}


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise UserError(f"cannot parse {origin}: {err}") from None
    for section in parser.sections():
        if section != "experiment" and section not in _SECTIONS:
            raise UserError(f"unknown config section [{section}]")
    top = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise UserError(f"unknown key [experiment] {key}")
            top[key] = _coerce(raw, _EXPERIMENT_KEYS[key], f"[experiment] {key}")
    cfg = ExperimentConfig(
        **top,
        **{name: _parse_section(parser, name, cls) for name, cls in _SECTIONS.items()},
    )
    if cfg.version != CONFIG_VERSION:
        raise UserError(
            f"unsupported config version {cfg.version} "
            f"(this build reads version {CONFIG_VERSION})"
        )
    # fail early on malformed format descriptors
    for descr in (cfg.precision.prop, cfg.precision.update):
        try:
            parse_format(descr)
        except ValueError as err:
            raise UserError(str(err)) from None
    if cfg.precision.dynamic:
        for descr in (cfg.precision.prop, cfg.precision.update):
            if not isinstance(parse_format(descr), FixedPoint):
                raise UserError("dynamic scaling requires fixed-point prop and update formats")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise UserError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), origin=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI serialization (round-trips through the parser)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {
        "name": cfg.name,
        "version": str(cfg.version),
        "output_dir": cfg.output_dir,
        "seed": str(cfg.seed),
    }
    for section, sub in (
        ("data", cfg.data), ("model", cfg.model),
        ("optimizer", cfg.optimizer), ("precision", cfg.precision),
    ):
        parser[section] = {}
        for f in fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                parser[section][f.name] = ",".join(str(v) for v in value)
            else:
                parser[section][f.name] = str(value)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


# ---------------------------------------------------------------------------
# data resolution
# ---------------------------------------------------------------------------

def resolve_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Build the train/test datasets a config asks for."""
    data = cfg.data
    if data.source == "synthetic":
        tr_img, tr_lbl, te_img, te_lbl = synthesize_digits(
            data.synthetic_train, data.synthetic_test, seed=data.synthetic_seed
        )
        train_ds = to_dataset(tr_img, tr_lbl)
        test_ds = to_dataset(te_img, te_lbl)
    elif data.source == "idx":
        base = Path(os.environ.get(DATA_ROOT_ENV, "."))
        root = base / data.root
        try:
            train_ds, test_ds = load_mnist_dir(root)
        except FileNotFoundError as err:
            raise UserError(str(err)) from None
    else:
        raise UserError(f"unknown data source {data.source!r} (expected synthetic or idx)")
    try:
        if data.n_train:
            train_ds = subset(train_ds, data.n_train, cfg.seed)
        if data.n_test:
            test_ds = subset(test_ds, data.n_test, cfg.seed + 1)
    except ValueError as err:
        raise UserError(str(err)) from None
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def format_bits(fmt: QuantFormat) -> int:
    """Total storage bits of a format (64 for the carrier)."""
    if isinstance(fmt, ExactHost):
        return 64
    if isinstance(fmt, FloatEmu):
        return 1 + fmt.exp_bits + fmt.man_bits
    if isinstance(fmt, FixedPoint):
        return fmt.width
    raise TypeError(f"not a quantization format: {fmt!r}")


def format_family(cfg: ExperimentConfig) -> str:
    if cfg.precision.dynamic:
        return "dynamic"
    fmt = parse_format(cfg.precision.prop)
    if isinstance(fmt, ExactHost):
        return "exact"
    if isinstance(fmt, FloatEmu):
        return "float"
    return "fixed"


def _classifier_for(cfg: ExperimentConfig, exponents: dict[str, int] | None) -> MaxoutClassifier:
    opt = cfg.optimizer
    return MaxoutClassifier(
        hidden_units=cfg.model.hidden_units,
        pieces=cfg.model.pieces,
        epochs=opt.epochs,
        batch_size=opt.batch_size,
        lr_start=opt.lr_start,
        lr_end=opt.lr_end,
        lr_decay_epochs=opt.lr_decay_epochs,
        momentum_start=opt.momentum_start,
        momentum_saturate=opt.momentum_saturate,
        momentum_saturate_epoch=opt.momentum_saturate_epoch,
        max_norm=opt.max_norm if opt.max_norm > 0 else None,
        dropout_input=opt.dropout_input,
        dropout_hidden=opt.dropout_hidden,
        prop_format=cfg.precision.prop,
        update_format=cfg.precision.update,
        dynamic_scaling=cfg.precision.dynamic,
        max_overflow_rate=cfg.precision.max_overflow_rate,
        scaling_period=cfg.precision.period,
        calibration_epochs=cfg.precision.calibration_epochs,
        initial_exponents=exponents,
        seed=cfg.seed,
    )


@dataclass
class RunResult:
    config: ExperimentConfig
    classifier: MaxoutClassifier
    test_error: float
    summary_row: str
    output_dir: Path


def _summary_text(cfg: ExperimentConfig, test_error: float) -> tuple[str, str]:
    prop_bits = format_bits(parse_format(cfg.precision.prop))
    update_bits = format_bits(parse_format(cfg.precision.update))
    row = f"{format_family(cfg)},{prop_bits},{update_bits},{test_error:.6f}"
    return "format,prop_bits,update_bits,test_error\n" + row + "\n", row


def run(cfg: ExperimentConfig, write_outputs: bool = True) -> RunResult:
    """Train one configuration end to end and write its artifacts."""
    train_ds, test_ds = resolve_dataset(cfg)

    exponents = None
    if cfg.precision.dynamic and cfg.precision.scales_file:
        scales_path = Path(cfg.precision.scales_file)
        if not scales_path.exists():
            raise UserError(f"scales file not found: {scales_path}")
        exponents = read_exponent_file(scales_path)

    clf = _classifier_for(cfg, exponents)
    clf.fit(train_ds.X, train_ds.y, eval_set=(test_ds.X, test_ds.y))
    test_error = clf.log_[-1].test_error
    summary, row = _summary_text(cfg, test_error)

    out_dir = cfg.resolved_output_dir
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.csv").write_text(summary)
        (out_dir / "config.ini").write_text(dump_config(cfg))

        log_lines = ["epoch,split,error,lr,momentum\n"]
        exp_lines = ["epoch,group_id,exponent\n"]
        for rec in clf.log_:
            log_lines.append(
                f"{rec.epoch},train,{rec.train_error:.6f},{rec.lr:.6f},{rec.momentum:.6f}\n"
            )
            if rec.test_error is not None:
                log_lines.append(
                    f"{rec.epoch},test,{rec.test_error:.6f},{rec.lr:.6f},{rec.momentum:.6f}\n"
                )
            for gid, exp in rec.exponents.items():
                exp_lines.append(f"{rec.epoch},{gid},{exp}\n")
        (out_dir / "log.csv").write_text("".join(log_lines))
        (out_dir / "exponents.csv").write_text("".join(exp_lines))

        write_exponent_file(
            out_dir / "scales.tsv",
            [ScaleGroup(gid, g.exponent) for gid, g in sorted(clf.groups_.items())],
        )
        save_checkpoint(out_dir / "checkpoint.bin", clf.network_)
    return RunResult(cfg, clf, test_error, row, out_dir)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _set_prop(cfg: ExperimentConfig, fmt: QuantFormat) -> ExperimentConfig:
    return replace(cfg, precision=replace(cfg.precision, prop=format_to_str(fmt)))


def _set_update(cfg: ExperimentConfig, fmt: QuantFormat) -> ExperimentConfig:
    return replace(cfg, precision=replace(cfg.precision, update=format_to_str(fmt)))


def _require_fixed(cfg: ExperimentConfig, descr: str) -> FixedPoint:
    fmt = parse_format(descr)
    if not isinstance(fmt, FixedPoint):
        raise UserError(f"this sweep variable needs a fixed-point format, got {descr!r}")
    return fmt


def _sweep_prop_width(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    fmt = _require_fixed(cfg, cfg.precision.prop)
    return _set_prop(cfg, FixedPoint(int(value), fmt.int_exp))


def _sweep_update_width(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    fmt = _require_fixed(cfg, cfg.precision.update)
    return _set_update(cfg, FixedPoint(int(value), fmt.int_exp))


def _sweep_radix(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    prop = _require_fixed(cfg, cfg.precision.prop)
    update = _require_fixed(cfg, cfg.precision.update)
    cfg = _set_prop(cfg, FixedPoint(prop.width, int(value)))
    return _set_update(cfg, FixedPoint(update.width, int(value)))


def _sweep_overflow_rate(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    return replace(cfg, precision=replace(cfg.precision, max_overflow_rate=float(value)))


SWEEP_VARIABLES = {
    "prop_width": _sweep_prop_width,
    "update_width": _sweep_update_width,
    "radix_exponent": _sweep_radix,
    "max_overflow_rate": _sweep_overflow_rate,
}


@dataclass
class SweepRow:
    variable: str
    value: float
    test_error: float
    normalized_error: float


def sweep(cfg: ExperimentConfig, variable: str, values: list[float],
          write_outputs: bool = True) -> list[SweepRow]:
    """Run one config per value and normalize errors by an exact baseline.

    The baseline run shares everything with ``cfg`` except precision,
    which is the carrier.  Results land in ``sweep.csv`` in the base
    config's output directory.
    """
    if variable not in SWEEP_VARIABLES:
        raise UserError(
            f"unknown sweep variable {variable!r} (one of {sorted(SWEEP_VARIABLES)})"
        )
    if not values:
        raise UserError("sweep needs at least one value")
    mutate = SWEEP_VARIABLES[variable]

    baseline_cfg = replace(
        cfg, name=cfg.name + "-baseline",
        output_dir=str(cfg.resolved_output_dir / "baseline"),
        precision=PrecisionConfig(prop="exact", update="exact", dynamic=False),
    )
    baseline = run(baseline_cfg, write_outputs=write_outputs)
    base_err = max(baseline.test_error, 1e-12)

    rows = []
    for value in values:
        point_cfg = mutate(cfg, value)
        point_cfg = replace(
            point_cfg, name=f"{cfg.name}-{variable}-{value:g}",
            output_dir=str(cfg.resolved_output_dir / f"{variable}-{value:g}"),
        )
        result = run(point_cfg, write_outputs=write_outputs)
        rows.append(SweepRow(variable, float(value), result.test_error,
                             result.test_error / base_err))

    if write_outputs:
        out_dir = cfg.resolved_output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["variable,value,test_error,normalized_error\n"]
        lines += [
            f"{r.variable},{r.value:g},{r.test_error:.6f},{r.normalized_error:.6f}\n"
            for r in rows
        ]
        (out_dir / "sweep.csv").write_text("".join(lines))
    return rows


def calibrate_run(cfg: ExperimentConfig, out_path: str | Path | None = None) -> dict[str, int]:
    """Run the calibration phase alone and write the exponent table."""
    from .network import TrainSettings, calibrate
    from .scaling import ScalingPolicy

    if not cfg.precision.dynamic:
        raise UserError("calibrate needs a config with [precision] dynamic = true")
    train_ds, _ = resolve_dataset(cfg)
    opt = cfg.optimizer
    settings = TrainSettings(
        epochs=opt.epochs, batch_size=opt.batch_size,
        lr_start=opt.lr_start, lr_end=opt.lr_end, lr_decay_epochs=opt.lr_decay_epochs,
        momentum_start=opt.momentum_start, momentum_saturate=opt.momentum_saturate,
        momentum_saturate_epoch=opt.momentum_saturate_epoch,
        max_norm=opt.max_norm if opt.max_norm > 0 else None,
        dropout_input=opt.dropout_input, dropout_hidden=opt.dropout_hidden,
        seed=cfg.seed, dynamic_scaling=False,
        policy=ScalingPolicy(cfg.precision.max_overflow_rate, cfg.precision.period),
    )
    n_classes = int(train_ds.y.max()) + 1
    exponents = calibrate(
        train_ds.X.shape[1], cfg.model.hidden_units, n_classes, cfg.model.pieces,
        train_ds, settings, calibration_epochs=cfg.precision.calibration_epochs,
    )
    if out_path is None:
        out_dir = cfg.resolved_output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / "scales.tsv"
    write_exponent_file(out_path, [ScaleGroup(g, e) for g, e in sorted(exponents.items())])
    return exponents


# ---------------------------------------------------------------------------
# MAC cost model
# ---------------------------------------------------------------------------

# Synthesis results for one multiply-accumulate unit, in FPGA adaptive
# logic modules: (multiplier bits, accumulator bits) -> ALMs.
MAC_COST_TABLE = {
    (32, 32): 504,
    (16, 32): 138,
    (16, 16): 128,
}


def _fit_cost_model() -> tuple[float, float]:
    # least squares for cost ~ alpha * mult^2 + beta * acc
    pts = sorted(MAC_COST_TABLE.items())
    A = np.array([[m * m, a] for (m, a), _ in pts], dtype=np.float64)
    y = np.array([c for _, c in pts], dtype=np.float64)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), float(coef[1])


_COST_ALPHA, _COST_BETA = _fit_cost_model()


@dataclass(frozen=True)
class MacCost:
    mult_bits: int
    acc_bits: int
    model_alms: float
    table_alms: int | None

    @property
    def alms(self) -> float:
        return float(self.table_alms) if self.table_alms is not None else self.model_alms


def mac_cost(mult_bits: int, acc_bits: int) -> MacCost:
    """Estimated FPGA cost of one MAC unit.

    Known synthesis points are returned exactly; anything else comes from
    the fitted ``alpha * mult^2 + beta * acc`` model (multiplier area is
    quadratic in operand width, accumulator area linear).
    """
    if not (1 <= mult_bits <= acc_bits <= 64):
        raise ValueError("need 1 <= mult_bits <= acc_bits <= 64")
    model = _COST_ALPHA * mult_bits * mult_bits + _COST_BETA * acc_bits
    return MacCost(mult_bits, acc_bits, model, MAC_COST_TABLE.get((mult_bits, acc_bits)))
