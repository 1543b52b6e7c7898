"""Declarative run configuration.

INI sections mirror the pipeline stages (audio, dsp, model, train, split,
paths) and every key defaults to the flagship hyperparameters, so an empty
file - or no file at all - reproduces the reference recipe. Floats are
serialized with shortest round-trip repr, making parse -> serialize ->
parse the identity.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .errors import ConfigError
from .features import DspConfig, FramingSpec, MelSpec
from .model import ArchConfig
from .train import TrainConfig


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    manifest: str = "data/manifest.csv"
    cache_dir: str = "features"
    run_dir: str = "runs"
    report_dir: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    sample_rate: int = 16000
    trim_db: float = -40.0
    dsp: DspConfig = field(default_factory=DspConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def default_config() -> RunConfig:
    return RunConfig()


def _to_strings(cfg: RunConfig) -> dict[str, dict[str, str]]:
    """Canonical string form; section and key order is the file order."""
    return {
        "audio": {
            "sample_rate": str(cfg.sample_rate),
            "trim_db": repr(cfg.trim_db),
        },
        "dsp": {
            "frame_ms": repr(cfg.dsp.framing.frame_ms),
            "hop_ms": repr(cfg.dsp.framing.hop_ms),
            "window": cfg.dsp.framing.window,
            "n_fft": str(cfg.dsp.mel.n_fft),
            "n_mels": str(cfg.dsp.mel.n_mels),
            "fmin": repr(cfg.dsp.mel.fmin),
            "fmax": repr(cfg.dsp.mel.fmax),
            "log_floor": repr(cfg.dsp.mel.log_floor),
            "target_frames": str(cfg.dsp.target_frames),
            "mfcc_coeffs": str(cfg.dsp.mfcc_coeffs),
        },
        "model": {
            "conv_channels": ",".join(str(c) for c in cfg.arch.conv_channels),
            "conv_kernel": str(cfg.arch.conv_kernel),
            "n_encoder_layers": str(cfg.arch.n_encoder_layers),
            "n_heads": str(cfg.arch.n_heads),
            "d_model": str(cfg.arch.d_model),
            "d_ff": str(cfg.arch.d_ff),
            "n_classes": str(cfg.arch.n_classes),
            "dropout_p": repr(cfg.arch.dropout_p),
            "bn_momentum": repr(cfg.arch.bn_momentum),
            "dtype": cfg.arch.dtype,
        },
        "train": {
            "lr0": repr(cfg.train.lr0),
            "weight_decay": repr(cfg.train.weight_decay),
            "batch_size": str(cfg.train.batch_size),
            "max_epochs": str(cfg.train.max_epochs),
            "early_stop_patience": str(cfg.train.early_stop_patience),
            "seed": str(cfg.train.seed),
            "beta1": repr(cfg.train.beta1),
            "beta2": repr(cfg.train.beta2),
            "eps": repr(cfg.train.eps),
            "eta_min": repr(cfg.train.eta_min),
        },
        "split": {
            "train": repr(cfg.split.train),
            "val": repr(cfg.split.val),
            "test": repr(cfg.split.test),
            "seed": str(cfg.split.seed),
        },
        "paths": {
            "data_dir": cfg.paths.data_dir,
            "manifest": cfg.paths.manifest,
            "cache_dir": cfg.paths.cache_dir,
            "run_dir": cfg.paths.run_dir,
            "report_dir": cfg.paths.report_dir,
        },
    }


def _parse(cast, section: str, key: str, raw: str):
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(","))


def _from_strings(strings: dict[str, dict[str, str]]) -> RunConfig:
    a, d, m = strings["audio"], strings["dsp"], strings["model"]
    t, s, p = strings["train"], strings["split"], strings["paths"]
    try:
        dsp = DspConfig(
            framing=FramingSpec(
                frame_ms=_parse(float, "dsp", "frame_ms", d["frame_ms"]),
                hop_ms=_parse(float, "dsp", "hop_ms", d["hop_ms"]),
                window=d["window"],
            ),
            mel=MelSpec(
                n_fft=_parse(int, "dsp", "n_fft", d["n_fft"]),
                n_mels=_parse(int, "dsp", "n_mels", d["n_mels"]),
                fmin=_parse(float, "dsp", "fmin", d["fmin"]),
                fmax=_parse(float, "dsp", "fmax", d["fmax"]),
                log_floor=_parse(float, "dsp", "log_floor", d["log_floor"]),
            ),
            target_frames=_parse(int, "dsp", "target_frames", d["target_frames"]),
            mfcc_coeffs=_parse(int, "dsp", "mfcc_coeffs", d["mfcc_coeffs"]),
        )
        arch = ArchConfig(
            n_mels=dsp.mel.n_mels,
            input_frames=dsp.target_frames,
            conv_channels=_parse(_int_tuple, "model", "conv_channels",
                                 m["conv_channels"]),
            conv_kernel=_parse(int, "model", "conv_kernel", m["conv_kernel"]),
            n_encoder_layers=_parse(int, "model", "n_encoder_layers",
                                    m["n_encoder_layers"]),
            n_heads=_parse(int, "model", "n_heads", m["n_heads"]),
            d_model=_parse(int, "model", "d_model", m["d_model"]),
            d_ff=_parse(int, "model", "d_ff", m["d_ff"]),
            n_classes=_parse(int, "model", "n_classes", m["n_classes"]),
            dropout_p=_parse(float, "model", "dropout_p", m["dropout_p"]),
            bn_momentum=_parse(float, "model", "bn_momentum", m["bn_momentum"]),
            dtype=m["dtype"],
        )
        train = TrainConfig(
            lr0=_parse(float, "train", "lr0", t["lr0"]),
            weight_decay=_parse(float, "train", "weight_decay", t["weight_decay"]),
            batch_size=_parse(int, "train", "batch_size", t["batch_size"]),
            max_epochs=_parse(int, "train", "max_epochs", t["max_epochs"]),
            early_stop_patience=_parse(int, "train", "early_stop_patience",
                                       t["early_stop_patience"]),
            seed=_parse(int, "train", "seed", t["seed"]),
            beta1=_parse(float, "train", "beta1", t["beta1"]),
            beta2=_parse(float, "train", "beta2", t["beta2"]),
            eps=_parse(float, "train", "eps", t["eps"]),
            eta_min=_parse(float, "train", "eta_min", t["eta_min"]),
        )
        split = SplitConfig(
            train=_parse(float, "split", "train", s["train"]),
            val=_parse(float, "split", "val", s["val"]),
            test=_parse(float, "split", "test", s["test"]),
            seed=_parse(int, "split", "seed", s["seed"]),
        )
        paths = PathsConfig(
            data_dir=p["data_dir"],
            manifest=p["manifest"],
            cache_dir=p["cache_dir"],
            run_dir=p["run_dir"],
            report_dir=p["report_dir"],
        )
        return RunConfig(
            sample_rate=_parse(int, "audio", "sample_rate", a["sample_rate"]),
            trim_db=_parse(float, "audio", "trim_db", a["trim_db"]),
            dsp=dsp, arch=arch, train=train, split=split, paths=paths,
        )
    except ValueError as exc:  # dataclass invariant violations
        raise ConfigError(str(exc)) from exc


def config_to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in _to_strings(cfg).items():
        parser[section] = keys
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _merge(base: dict[str, dict[str, str]], section: str, key: str, value: str):
    if section not in base:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in base[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    base[section][key] = value


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, overlaid with an INI file (if given), overlaid with
    ``section.key=value`` override strings (CLI flags win over the file)."""
    strings = _to_strings(default_config())
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                _merge(strings, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _merge(strings, section.strip(), key.strip(), value.strip())
    return _from_strings(strings)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_ini(cfg))
