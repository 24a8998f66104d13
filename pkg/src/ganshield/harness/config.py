"""Experiment configuration: a flat ``section.key = value`` text format.

Example::

    seed = 3
    dataset = two-gaussians
    attacks = fgsm, bim, mim, pgdm, vam
    attack.epsilon = 1.0
    attack.vam.epsilon = 0.75      # per-attack override
    gan.steps = 2000
    cleaning.sigma = 1.0

Lines starting with ``#`` are comments. Values are parsed as Python literals
where possible (numbers, tuples, booleans) and kept as strings otherwise.
Sub-seeds not given explicitly are derived from the master seed as
``sub_seed(master, component)``: the first eight bytes of
``sha256(f"{master}:{component}")`` reduced mod 2**32.
"""
from __future__ import annotations

import ast
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..attacks import ATTACKS, AttackConfig
from ..defense import CleaningConfig
from ..nets import TrainConfig


class ConfigError(ValueError):
    pass


def sub_seed(master: int, component: str) -> int:
    digest = hashlib.sha256(f"{master}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % 2**32


CLASSIFIER_DEFAULTS = TrainConfig(optimizer="adam", lr=1e-3, beta1=0.9, batch_size=64, steps=300)
GAN_DEFAULTS = TrainConfig(optimizer="sgd", lr=0.05, beta1=0.5, batch_size=32, steps=2000, checkpoint_every=500)
ATTACK_DEFAULTS = AttackConfig(epsilon=1.0, alpha=0.25, steps=10)


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "two-gaussians"
    labels: str = ""
    n_per_class: int = 500
    limit: int = 0
    downsample: int = 0
    classes: tuple = ()
    fractions: tuple = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class DetectionSpec:
    attack: str = "fgsm"
    p: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    chunk_size: int = 64
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    classifier: TrainConfig = CLASSIFIER_DEFAULTS
    gan: TrainConfig = GAN_DEFAULTS
    attacks: tuple = tuple((name, ATTACK_DEFAULTS) for name in ATTACKS)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    detection: DetectionSpec = field(default_factory=DetectionSpec)
    classifier_checkpoint: str = ""
    gan_checkpoint: str = ""
    sweep_steps: tuple = ()
    constant_d: bool = False

    def __post_init__(self):
        if self.workers < 1 or self.chunk_size < 1:
            raise ConfigError("workers and chunk_size must be >= 1")
        if not self.attacks:
            raise ConfigError("at least one attack must be configured")

    def attack(self, name: str) -> AttackConfig:
        for n, cfg in self.attacks:
            if n == name:
                return cfg
        raise ConfigError(f"attack {name!r} is not configured; have {[n for n, _ in self.attacks]}")

    def to_text(self) -> str:
        """Every resolved setting, one ``key = value`` per line, in a fixed order."""
        lines = [f"seed = {self.seed}", f"out = {self.out}", f"workers = {self.workers}", f"chunk_size = {self.chunk_size}"]
        for section, obj in (
            ("dataset", self.dataset),
            ("classifier", self.classifier),
            ("gan", self.gan),
            ("cleaning", self.cleaning),
            ("detection", self.detection),
        ):
            lines += [f"{section}.{k} = {_fmt(v)}" for k, v in asdict(obj).items()]
        lines.append("attacks = " + ", ".join(n for n, _ in self.attacks))
        for name, cfg in self.attacks:
            lines += [f"attack.{name}.{k} = {_fmt(v)}" for k, v in asdict(cfg).items()]
        lines += [
            f"classifier.checkpoint = {self.classifier_checkpoint}",
            f"gan.checkpoint = {self.gan_checkpoint}",
            f"sweep.steps = {_fmt(self.sweep_steps)}",
            f"test.constant_d = {self.constant_d}",
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        # the output directory does not change results, so it stays out of the hash
        text = "\n".join(l for l in self.to_text().splitlines() if not l.startswith(("out =", "workers =")))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v) if len(v) != 1 else f"{_fmt(v[0])},"
    return repr(v) if isinstance(v, float) else str(v)


def _literal(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    try:
        return float(text)  # inf / nan
    except ValueError:
        return text


def parse_text(text: str) -> dict[str, object]:
    """Parse the flat format into an ordered ``{key: value}`` dict."""
    entries: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = _literal(value)
    return entries


def _apply(obj, section: str, values: dict[str, object]):
    names = {f.name: f for f in fields(obj)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {sorted(unknown)}")
    cleaned = {}
    for k, v in values.items():
        cur = getattr(obj, k)
        if isinstance(cur, tuple):
            v = tuple(v) if isinstance(v, (tuple, list)) else (() if v == "" else (v,))
        elif isinstance(cur, bool):
            v = bool(v)
        elif isinstance(cur, float) and isinstance(v, int):
            v = float(v)
        elif isinstance(cur, str):
            v = str(v)
        if type(v) is not type(cur) and not (isinstance(cur, tuple) and isinstance(v, tuple)):
            raise ConfigError(f"{section}.{k}: expected {type(cur).__name__}, got {v!r}")
        cleaned[k] = v
    try:
        return replace(obj, **cleaned)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc


def build(entries: dict[str, object], seed: int | None = None) -> ExperimentConfig:
    """Resolve parsed entries (plus an optional seed override) against the defaults."""
    sections: dict[str, dict] = {}
    top: dict[str, object] = {}
    per_attack: dict[str, dict] = {}
    for key, value in entries.items():
        parts = key.split(".")
        if len(parts) == 1:
            top[key] = value
        elif parts[0] == "attack" and len(parts) == 3:
            per_attack.setdefault(parts[1], {})[parts[2]] = value
        elif len(parts) == 2:
            sections.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"cannot interpret key {key!r}")

    known_top = {"seed", "out", "workers", "chunk_size", "dataset", "attacks"}
    if set(top) - known_top:
        raise ConfigError(f"unknown key(s): {sorted(set(top) - known_top)}")
    master = seed if seed is not None else top.get("seed", 0)
    if not isinstance(master, int) or master < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {master!r}")

    ds_values = dict(sections.pop("dataset", {}))
    if "dataset" in top:
        ds_values["name"] = str(top["dataset"])
    dataset = _apply(DatasetSpec(), "dataset", ds_values)

    train = {}
    for name, defaults in (("classifier", CLASSIFIER_DEFAULTS), ("gan", GAN_DEFAULTS)):
        values = dict(sections.pop(name, {}))
        ckpt = values.pop("checkpoint", "")
        values.setdefault("seed", sub_seed(master, name))
        train[name] = (_apply(defaults, name, values), str(ckpt))

    shared = sections.pop("attack", {})
    names = top.get("attacks", tuple(ATTACKS))
    if isinstance(names, str):
        names = tuple(s.strip() for s in names.split(",") if s.strip())
    names = tuple(names)
    for n in names:
        if n not in ATTACKS:
            raise ConfigError(f"unknown attack {n!r}; choose from {sorted(ATTACKS)}")
    if set(per_attack) - set(names):
        raise ConfigError(f"overrides given for unlisted attack(s) {sorted(set(per_attack) - set(names))}")
    attack_cfgs = []
    for n in names:
        values = {**shared, **per_attack.get(n, {})}
        values.setdefault("seed", sub_seed(master, f"attack.{n}"))
        attack_cfgs.append((n, _apply(ATTACK_DEFAULTS, f"attack.{n}", values)))

    cl_values = dict(sections.pop("cleaning", {}))
    cl_values.setdefault("seed", sub_seed(master, "cleaning"))
    cleaning = _apply(CleaningConfig(), "cleaning", cl_values)
    detection = _apply(DetectionSpec(), "detection", sections.pop("detection", {}))
    if detection.attack not in names:
        raise ConfigError(f"detection.attack {detection.attack!r} must be one of the configured attacks")
    sweep = sections.pop("sweep", {})
    test = sections.pop("test", {})
    if set(sweep) - {"steps"} or set(test) - {"constant_d"}:
        raise ConfigError("unknown sweep/test keys")
    if sections:
        raise ConfigError(f"unknown section(s): {sorted(sections)}")
    steps = sweep.get("steps", ())
    steps = tuple(steps) if isinstance(steps, (tuple, list)) else (() if steps == "" else (steps,))

    try:
        return ExperimentConfig(
            seed=master,
            out=str(top.get("out", ExperimentConfig.out)),
            workers=int(top.get("workers", 1)),
            chunk_size=int(top.get("chunk_size", ExperimentConfig.chunk_size)),
            dataset=dataset,
            classifier=train["classifier"][0],
            gan=train["gan"][0],
            attacks=tuple(attack_cfgs),
            cleaning=cleaning,
            detection=detection,
            classifier_checkpoint=train["classifier"][1],
            gan_checkpoint=train["gan"][1],
            sweep_steps=tuple(int(s) for s in steps),
            constant_d=bool(test.get("constant_d", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path=None, seed: int | None = None, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    entries = parse_text(Path(path).read_text()) if path else {}
    entries.update(overrides or {})
    return build(entries, seed)


def from_dict(values: dict[str, object], seed: int | None = None) -> ExperimentConfig:
    """Build from ``{"gan.steps": 500, ...}``; handy in tests and notebooks."""
    return build(dict(values), seed)
