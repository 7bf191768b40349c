"""Experiment configuration, artifact stamping and a cache of trained networks."""
from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, nn
from .dqn import TrainConfig, train
from .env import ClosureScenario, TaxEnv, TaxParams

log = logging.getLogger(__name__)

# discount factor that makes the risk-neutral "never" start value 3254.6 with R=100
CALIBRATED_DISCOUNT = 0.9709432873232291

STAMP_PREFIX = "# config_hash="

PROFILE_DIR = Path(__file__).parent / "configs"
PROFILES = ("default", "desk")


class ConfigError(ValueError):
    pass


class ArtifactMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 100
    steps: int = 250


@dataclass(frozen=True)
class SweepSettings:
    lambdas: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)


@dataclass(frozen=True)
class CalibrateSettings:
    target: float = 0.4
    lo: float = 0.0
    hi: float = 7.0
    tolerance: float = 0.03
    max_probes: int = 12


@dataclass(frozen=True)
class ExperimentConfig:
    tax: TaxParams = field(default_factory=lambda: TaxParams(discount=CALIBRATED_DISCOUNT))
    train: TrainConfig = field(default_factory=TrainConfig)
    trunk: tuple = (256, 256, 256)
    eval: EvalSettings = field(default_factory=EvalSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    calibrate: CalibrateSettings = field(default_factory=CalibrateSettings)
    out: str = "runs/default"

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def scenario(self) -> str:
        return self.tax.scenario.label

    def network_spec(self, params: Optional[TaxParams] = None) -> nn.NetworkSpec:
        dim = TaxEnv(params or self.tax).obs_dim
        return nn.NetworkSpec(input_dim=dim, trunk=tuple(self.trunk))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))

    def with_out(self, out: str) -> "ExperimentConfig":
        return replace(self, out=str(out))

    def to_dict(self) -> dict:
        tax = asdict(self.tax)
        tax["scenario"] = self.tax.scenario.label
        return {
            "seed": self.train.seed,
            "out": self.out,
            "tax": tax,
            "train": {k: v for k, v in asdict(self.train).items() if k != "seed"},
            "network": {"trunk": list(self.trunk)},
            "eval": asdict(self.eval),
            "sweep": {"lambdas": list(self.sweep.lambdas)},
            "calibrate": asdict(self.calibrate),
        }

    @property
    def hash(self) -> str:
        """Hash of everything that affects results (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("out")
        return nn.config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            seed = int(d.pop("seed", 0))
            out = str(d.pop("out", "runs/default"))
            tax = dict(d.pop("tax", {}))
            if "scenario" in tax:
                tax["scenario"] = ClosureScenario.parse(str(tax["scenario"]))
            tax.setdefault("discount", CALIBRATED_DISCOUNT)
            train_d = dict(d.pop("train", {}))
            network = dict(d.pop("network", {}))
            trunk = tuple(int(w) for w in network.pop("trunk", (256, 256, 256)))
            ev = EvalSettings(**d.pop("eval", {}))
            sw = dict(d.pop("sweep", {}))
            if "lambdas" in sw:
                sw["lambdas"] = tuple(float(x) for x in sw["lambdas"])
            sweep = SweepSettings(**sw)
            cal = CalibrateSettings(**d.pop("calibrate", {}))
            if d or network:
                raise ConfigError(f"unknown config keys: {sorted(set(d) | set(network))}")
            _check_keys(TaxParams, tax, "tax")
            _check_keys(TrainConfig, train_d, "train")
            cfg = cls(TaxParams(**tax), TrainConfig(seed=seed, **train_d), trunk, ev, sweep, cal, out)
            cfg.network_spec()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.eval.episodes <= 0 or cfg.eval.steps <= 0:
            raise ConfigError("eval episodes and steps must be positive")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        """Load a TOML/JSON file, or a shipped profile by name (``default``, ``desk``)."""
        path = Path(path)
        if not path.exists() and str(path) in PROFILES:
            path = PROFILE_DIR / f"{path}.toml"
        try:
            with open(path, "rb") as fh:
                if path.suffix == ".json":
                    d = json.load(fh)
                else:
                    d = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def write_resolved(self, directory: str | Path) -> Path:
        path = Path(directory) / "resolved_config.json"
        d = self.to_dict()
        d["config_hash"] = self.hash
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path


def _check_keys(cls, d: dict, section: str) -> None:
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")


# --- stamped artifacts -------------------------------------------------------

def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], cfg_hash: str) -> Path:
    """CSV whose first line records the config hash; floats are written with ``repr``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"{STAMP_PREFIX}{cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    return path


def write_text(path: str | Path, text: str, cfg_hash: str, comment: str = "#") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{comment} config_hash={cfg_hash}\n{text}")
    return path


def read_stamp(path: str | Path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    for prefix in (STAMP_PREFIX, "// config_hash="):
        if first.startswith(prefix):
            return first[len(prefix):]
    raise ArtifactMismatch(f"{path}: no config hash stamp")


def read_csv(path: str | Path, expect_hash: Optional[str] = None) -> list[dict]:
    """Rows of a stamped CSV; refuses a file produced under a different config."""
    stamp = read_stamp(path)
    if expect_hash is not None and stamp != expect_hash:
        raise ArtifactMismatch(f"{path}: produced under config {stamp}, expected {expect_hash}")
    with open(path, newline="") as fh:
        fh.readline()
        return list(csv.DictReader(fh))


def check_checkpoint(header: dict, expect_hash: str, path) -> None:
    got = header.get("config_hash", "")
    if got != expect_hash:
        raise ArtifactMismatch(f"{path}: checkpoint trained under config {got or '<none>'}, "
                               f"current config is {expect_hash}")


# --- cached training -----------------------------------------------------------

def job_hash(params: TaxParams, config: TrainConfig, spec: nn.NetworkSpec) -> str:
    tax = asdict(params)
    tax["scenario"] = params.scenario.label
    # the package version invalidates cached jobs when training code changes
    return nn.config_hash({"tax": tax, "train": asdict(config), "network": asdict(spec),
                           "version": __version__})


class CachedTrainer:
    """Trainer that stores each trained network under its job hash.

    Training is deterministic given its inputs, so a cache hit returns exactly
    the network a fresh run would produce.
    """

    def __init__(self, root: str | Path, on_log=None):
        self.root = Path(root)
        self.on_log = on_log
        self.hits = 0
        self.misses = 0

    def path(self, params: TaxParams, config: TrainConfig, spec: nn.NetworkSpec) -> Path:
        return self.root / f"{job_hash(params, config, spec)}.npz"

    def __call__(self, params: TaxParams, config: TrainConfig,
                 spec: Optional[nn.NetworkSpec] = None) -> nn.Network:
        if spec is None:
            spec = nn.NetworkSpec(input_dim=TaxEnv(params).obs_dim)
        path = self.path(params, config, spec)
        jh = path.stem
        if path.exists():
            try:
                net, _, header = nn.load(path, spec.input_dim)
                if header.get("config_hash") == jh:
                    self.hits += 1
                    return net
            except nn.CheckpointError as exc:
                log.warning("ignoring unreadable cache entry %s: %s", path, exc)
        self.misses += 1
        log.info("training job %s (lambda=%g, %s)", jh, params.risk_aversion, params.scenario.label)
        res = train(params, config, spec)
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        nn.save(tmp, res.net, res.learner.adam, cfg_hash=jh,
                extra={"log": [asdict(r) for r in res.log], "seconds": res.seconds})
        tmp.replace(path)
        if self.on_log:
            self.on_log(params, res)
        return res.net

    def log_of(self, params: TaxParams, config: TrainConfig, spec: nn.NetworkSpec) -> list:
        _, _, header = nn.load(self.path(params, config, spec))
        return header["extra"]["log"]
