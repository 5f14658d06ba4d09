"""Grounding entry points: fitted and learned estimators plus the shared
tuple -> field -> argmax pipeline.

The fitted estimator needs no training: each predicate maps to canonical
polar parameters scaled by the referent's box diagonal, and component
weights come from referent/name embedding cosines sharpened by a softmax.
The learned estimator wraps the trained network. Both expose the same
``estimate`` interface so callers select them by a mode flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from polarground.estimator import EstimatorModel, estimate_sequence
from polarground.parsing import RelationTuple, cosine, embed_text
from polarground.polar import (
    GridSpec,
    MixtureComponent,
    PolarParams,
    ScoreField,
    SpatialMixture,
    combine_score_fields,
    grid_argmax,
    score_field,
)
from polarground.scene import SceneGraph

# Mode angles for the directional predicates, in the +x-right/+y-up frame
# the relation checkers use.
DIRECTION_ANGLES = {
    "left": math.pi,
    "right": 0.0,
    "above": math.pi / 2,
    "below": -math.pi / 2,
    "left above": 3 * math.pi / 4,
    "right above": math.pi / 4,
    "left below": -3 * math.pi / 4,
    "right below": -math.pi / 4,
}

# Navigation-style predicates grounded in the same frame: "front" of an
# object faces the viewer (-y), "behind" is +y.
PREDICATE_ALIASES = {"front": "below", "behind": "above"}

DEFAULT_TEMPERATURE = 0.1

_AXIS_PREDICATES = frozenset({"left", "right", "above", "below"})


def canonical_params(predicate: str, diagonal: float) -> PolarParams:
    """Canonical polar parameters for a predicate, scaled by box diagonal.

    The radial profiles are tuned for multiplying several expression fields
    together: each one dips hard near its own anchor (so products cannot
    settle inside the directional margin ring) and keeps enough outward
    spread that distant satisfying cells are not starved. Single-axis
    relations take a wide angular lobe because their checkers accept a full
    half-plane; diagonal relations concentrate on their quadrant. "close"
    rings just inside its checker radius, "far" rises past its checker
    radius and levels off.
    """
    pred = PREDICATE_ALIASES.get(predicate, predicate)
    if pred in DIRECTION_ANGLES:
        if pred in _AXIS_PREDICATES:
            mu_d, sigma, kappa = 7.0 * diagonal, 4.0 * diagonal, 2.0
        else:
            mu_d, sigma, kappa = 4.4 * diagonal, 2.4 * diagonal, 4.5
        return PolarParams(
            mu_d=mu_d,
            var_d=sigma**2,
            mu_phi=DIRECTION_ANGLES[pred],
            kappa_phi=kappa,
        )
    if pred == "close":
        return PolarParams(
            mu_d=1.5 * diagonal,
            var_d=(0.65 * diagonal) ** 2,
            mu_phi=0.0,
            kappa_phi=0.0,
        )
    if pred == "far":
        return PolarParams(
            mu_d=8.5 * diagonal,
            var_d=(2.25 * diagonal) ** 2,
            mu_phi=0.0,
            kappa_phi=0.0,
        )
    raise KeyError(predicate)


def _known_predicates() -> list[str]:
    return list(DIRECTION_ANGLES) + ["close", "far"] + list(PREDICATE_ALIASES)


def resolve_predicate(pred_text: str) -> str:
    """Snap arbitrary predicate text onto the closest known predicate."""
    known = _known_predicates()
    if pred_text in known:
        return pred_text
    vec = embed_text(pred_text)
    return max(known, key=lambda p: cosine(vec, embed_text(p)))


@dataclass(frozen=True)
class FittedEstimator:
    """Table-driven estimator; weights from name/referent similarity."""

    temperature: float = DEFAULT_TEMPERATURE

    def estimate(
        self, scene: SceneGraph, tuples: list[RelationTuple]
    ) -> list[SpatialMixture]:
        return [self._mixture(scene, rel) for rel in tuples]

    def _mixture(self, scene: SceneGraph, rel: RelationTuple) -> SpatialMixture:
        nodes = scene.ordered_nodes()
        if not nodes:
            raise ValueError("scene has no objects")
        predicate = resolve_predicate(rel.pred_text)
        scores = np.array(
            [cosine(rel.f_ref, embed_text(node.name)) for node in nodes]
        )
        sharpened = np.exp((scores - scores.max()) / self.temperature)
        weights = sharpened / sharpened.sum()
        components = tuple(
            MixtureComponent(
                weight=float(weights[j]),
                params=canonical_params(predicate, node.diagonal),
                anchor=node.coord,
                node_id=node.id,
            )
            for j, node in enumerate(nodes)
        )
        return SpatialMixture(components=components)


@dataclass(frozen=True)
class LearnedEstimator:
    model: EstimatorModel

    def estimate(
        self, scene: SceneGraph, tuples: list[RelationTuple]
    ) -> list[SpatialMixture]:
        return [mix for mix, _ in estimate_sequence(scene, tuples, self.model)]


def make_estimator(mode: str, model: EstimatorModel | None = None):
    if mode == "fitted":
        return FittedEstimator()
    if mode == "learned":
        if model is None:
            raise ValueError("learned mode requires a model")
        return LearnedEstimator(model=model)
    raise ValueError(f"unknown mode {mode!r} (expected 'fitted' or 'learned')")


@dataclass(frozen=True)
class GroundingResult:
    location: tuple[float, float]
    score: float  # peak of the product of peak-normalized per-tuple fields
    mixtures: tuple[SpatialMixture, ...]
    fields: tuple[ScoreField, ...]
    combined: ScoreField
    per_tuple_value: tuple[float, ...]  # each tuple's normalized field at argmax


def ground_tuples(
    scene: SceneGraph,
    tuples: list[RelationTuple],
    estimator,
    grid: GridSpec,
) -> GroundingResult:
    """Estimate one field per tuple, multiply, and pick the best cell."""
    mixtures = estimator.estimate(scene, tuples)
    fields = []
    for mix in mixtures:
        raw = score_field(mix, grid)
        fields.append(ScoreField(grid=grid, values=raw.values / raw.values.max()))
    combined = combine_score_fields(fields)
    (px, py), _ = grid_argmax(combined)
    product_peak = float(np.prod([f.values for f in fields], axis=0).max())
    xs, ys = grid.cell_centers()
    j = int(np.argmin(np.abs(xs - px)))
    i = int(np.argmin(np.abs(ys - py)))
    per_tuple = tuple(float(f.values[i, j]) for f in fields)
    return GroundingResult(
        location=(px, py),
        score=product_peak,
        mixtures=tuple(mixtures),
        fields=tuple(fields),
        combined=combined,
        per_tuple_value=per_tuple,
    )
