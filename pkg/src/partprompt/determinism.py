"""Seed derivation, deterministic execution mode, and parameter fingerprints.

Every stochastic component receives its own sub-seed derived from the run
seed and a stable component name, so adding or removing one component never
shifts the initialization of another. Deterministic mode (64-bit floats,
single-threaded CPU kernels) is what the test suite and the reproducibility
contracts run under; it is forced by ``PARTSEG_DETERMINISTIC=1``.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
import torch

DETERMINISTIC_ENV_VAR = "PARTSEG_DETERMINISTIC"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def derive_seed(master_seed: int, component: str) -> int:
    """Stable 63-bit sub-seed for ``component`` under ``master_seed``."""
    digest = hashlib.blake2b(
        f"{master_seed}:{component}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator_for(master_seed: int, component: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, component))
    return gen


def numpy_rng_for(master_seed: int, component: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, component)))


def deterministic_mode_forced() -> bool:
    return os.environ.get(DETERMINISTIC_ENV_VAR, "") == "1"


def resolve_dtype(name: str) -> torch.dtype:
    if deterministic_mode_forced():
        return torch.float64
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")


def enable_deterministic_execution() -> None:
    """Pin the torch runtime so reruns are bitwise reproducible on CPU."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def parameter_fingerprint(module: torch.nn.Module) -> str:
    """SHA-256 over the named parameters and buffers of ``module``.

    Bit-identical parameters give identical fingerprints, which is how the
    frozen-text and evaluation-purity invariants are asserted.
    """
    hasher = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name]
        hasher.update(name.encode("utf-8"))
        hasher.update(str(tuple(tensor.shape)).encode("utf-8"))
        hasher.update(
            tensor.detach().to(torch.float64).contiguous().numpy().tobytes()
        )
    return hasher.hexdigest()
