"""JSON run configuration with full defaults and strict key validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, fields

from .data import CorpusConfig
from .objective import LossConfig
from .predictor import SetPredictorConfig
from .similarity import SimilarityConfig
from .trainer import TrainConfig

_SECTIONS = {
    "data": CorpusConfig,
    "predictor": SetPredictorConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": None,   # plain dict, see _EVAL_DEFAULTS
}

_EVAL_DEFAULTS = {
    "recall_ks": [1, 5, 10],
    "split": "val",          # "val" | "all"
}


class ConfigError(ValueError):
    pass


def _build_section(cls, payload: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    kwargs = dict(payload)
    if cls is LossConfig and "sim" in kwargs:
        kwargs["sim"] = _build_section(SimilarityConfig, kwargs["sim"], path + ".sim")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


class RunConfig:
    """Validated bundle of all component configs plus eval options."""

    def __init__(self, data: CorpusConfig, predictor: SetPredictorConfig,
                 loss: LossConfig, train: TrainConfig, eval_opts: dict):
        self.data = data
        self.predictor = predictor
        self.loss = loss
        self.train = train
        self.eval_opts = eval_opts

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, section_cls in _SECTIONS.items():
            payload = doc.get(name, {})
            if section_cls is None:
                bad = set(payload) - set(_EVAL_DEFAULTS)
                if bad:
                    raise ConfigError(f"unknown keys in eval: {sorted(bad)}")
                built[name] = {**_EVAL_DEFAULTS, **payload}
            else:
                built[name] = _build_section(section_cls, payload, name)
        return cls(built["data"], built["predictor"], built["loss"],
                   built["train"], built["eval"])

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "predictor": asdict(self.predictor),
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "eval": self.eval_opts,
        }
        d["loss"]["sim"]["kind"] = self.loss.sim.kind.value
        return d

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:16]
