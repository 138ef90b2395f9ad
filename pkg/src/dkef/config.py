"""Run configuration: flat ``key = value`` files with documented defaults."""

from dataclasses import dataclass, fields, replace

from .errors import ParseError
from .featnet import NetSpec
from .trainer import Architecture, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    layers: int = 3
    width: int = 30
    components: int = 3
    skip: bool = True
    dequantize: bool = False
    whiten: bool = True

    def architecture(self, D):
        return Architecture(NetSpec(D, self.layers, self.width, self.skip if self.layers > 1 else False),
                            self.components)


def _convert(text, typ, key):
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParseError(f"{key}: expected a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise ParseError(f"{key}: cannot parse {text!r}") from None


def parse(text):
    """Parse config text into a RunConfig; ``none`` clears optional values."""
    train_f = {f.name: f for f in fields(TrainConfig)}
    run_f = {f.name: f for f in fields(RunConfig) if f.name != "train"}
    tvals, rvals = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ParseError(f"expected key = value, got {raw!r}", row=lineno)
        if key in train_f:
            f = train_f[key]
            if val.lower() == "none":
                tvals[key] = None
            else:
                typ = float if key == "max_wallclock" else f.type
                tvals[key] = _convert(val, typ, key)
        elif key in run_f:
            rvals[key] = _convert(val, run_f[key].type, key)
        else:
            raise ParseError(f"unknown config key {key!r}", row=lineno)
    try:
        return RunConfig(train=replace(TrainConfig(), **tvals), **rvals)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load(path):
    with open(path) as fh:
        return parse(fh.read())


def dumps(cfg):
    lines = [f"{f.name} = {getattr(cfg.train, f.name)}" for f in fields(TrainConfig)]
    lines += [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig) if f.name != "train"]
    return "\n".join(lines) + "\n"
