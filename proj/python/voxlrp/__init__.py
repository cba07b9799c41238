"""3D CNN training and relevance maps on volumetric cohorts."""

import json as _json

from ._core import (
    ApiService as _ApiService,
    Model as _Model,
    VoxlrpError,
    conv3d,
    dice,
    lrp_dense,
    maxpool3d,
    pearson,
    read_volume,
    roc_auc,
    shift_volume,
    write_volume,
)
from . import _core

STAGES = ("synth", "residualize", "split", "train", "cv", "explain", "metrics")


def run_stage(stage, config):
    """Run one pipeline stage with a config dict; returns the stage summary."""
    return _json.loads(_core.run_stage(stage, _json.dumps(config)))


def run_pipeline(config, stages=("synth", "residualize", "split", "cv", "explain", "metrics")):
    return {s: run_stage(s, config) for s in stages}


def count_parameters(spec):
    trainable, non_trainable = _core.count_parameters(_json.dumps(spec))
    return {"trainable": trainable, "non_trainable": non_trainable, "total": trainable + non_trainable}


class Model:
    def __init__(self, core):
        self._m = core

    @classmethod
    def load(cls, path):
        return cls(_Model.load(str(path)))

    @classmethod
    def build(cls, spec, seed=0):
        return cls(_Model.build(_json.dumps(spec), seed))

    def save(self, path):
        self._m.save(str(path))

    @property
    def spec(self):
        return _json.loads(self._m.spec)

    def logits(self, volume):
        return self._m.logits(volume)

    def relevance(self, volume, target=1, alpha=1.0, beta=0.0, epsilon=1e-9):
        """(map with the volume's shape, logit)."""
        return self._m.relevance(volume, target, alpha, beta, epsilon)


class ApiService:
    """In-process view of the HTTP API; get() returns (status, decoded body)."""

    def __init__(self, out, manifest=None):
        manifest = manifest or f"{out}/cohort/manifest.json"
        self._s = _ApiService(str(out), str(manifest))

    def get(self, path, **query):
        status, body = self._s.get(path, {k: str(v) for k, v in query.items()})
        return status, _json.loads(body)
