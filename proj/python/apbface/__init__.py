"""Audio, pose and blink driven face reenactment."""

import json

from ._core import (  # noqa: F401
    ConfigError,
    DataError,
    Engine,
    IoError,
    face_mask,
    frechet,
    mfcc,
    pipeline_version,
    rasterize,
    ssim,
    synth_dataset,
)


def request(engine, method, path, payload=None):
    """Sends one request through the engine's router and decodes the JSON reply."""
    status, body = engine.handle(method, path, "" if payload is None else json.dumps(payload))
    try:
        return status, json.loads(body)
    except ValueError:
        return status, body
