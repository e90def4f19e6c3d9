"""Outcome models ``p(psi | s)``: exact particle atoms and a conditional diffusion model."""

import numpy as np

from dispo.errors import UnsupportedOperationError
from dispo.outcome.diffusion import (
    DiffusionConfig,
    DiffusionOutcomeModel,
    bootstrap_targets,
    ddim_sample,
    diffusion_train_step,
    sample_diffusion,
    train_on_dataset,
)
from dispo.outcome.particle import (
    ParticleOutcomeModel,
    default_merge_tol,
    hausdorff,
    merge_atoms,
    particle_backup,
    particle_fixed_point,
    sample_particle,
)
from dispo.outcome.particle import support_query as _particle_support


def sample_outcomes(model, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` outcome draws at state ``s`` from either backend, shape ``(n, d)``."""
    if isinstance(model, ParticleOutcomeModel):
        return sample_particle(model, s, n, rng)
    return sample_diffusion(model, s, n, rng)


def support_query(model, s: int, psi, epsilon: float, tol: float | None = None) -> bool:
    if not isinstance(model, ParticleOutcomeModel):
        raise UnsupportedOperationError("support queries are only defined for the particle backend")
    return _particle_support(model, s, psi, epsilon, tol)


__all__ = [
    "DiffusionConfig", "DiffusionOutcomeModel", "ParticleOutcomeModel", "bootstrap_targets",
    "ddim_sample", "default_merge_tol", "diffusion_train_step", "hausdorff", "merge_atoms",
    "particle_backup", "particle_fixed_point", "sample_outcomes", "support_query", "train_on_dataset",
]
