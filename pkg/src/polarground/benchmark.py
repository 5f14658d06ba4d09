"""Synthetic grounding benchmark: scenes, composite instructions with ground
truth, relation checkers, and the scoring harness.

Episodes place 2-7 non-overlapping boxes in a unit workspace, attach one to
six (referent, predicate) relations whose conjunction is guaranteed
satisfiable, sample a ground-truth location from the satisfying cells, and
render the instruction through templates the grammar parser accepts verbatim.
Scoring is the fraction of relations satisfied at a proposed point.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from polarground.estimator import EstimatorModel, TrainingSample
from polarground.grounding import ground_tuples, make_estimator
from polarground.parsing import (
    PREDICATE_VOCABULARY,
    LlmClientConfig,
    ParsedInstruction,
    parse_grammar,
    parse_llm,
    to_relation_tuples,
)
from polarground.polar import GridSpec
from polarground.scene import (
    ObjectNode,
    SceneGraph,
    build_scene_graph,
    scene_from_dict,
    scene_to_dict,
)

COLORS = ("red", "green", "blue", "yellow", "gray", "cyan", "purple", "orange")
SHAPES = ("bowl", "cube", "ring", "box", "spoon", "block")
OBJECT_NAMES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)

VERBS = ("put", "move", "place")


class GenerationError(RuntimeError):
    """Episode constraints could not be satisfied within the rejection cap."""


@dataclass(frozen=True)
class TaskConfig:
    n_objects: tuple[int, int] = (2, 7)
    n_relations: tuple[int, int] = (1, 3)
    predicates: tuple[str, ...] = PREDICATE_VOCABULARY
    workspace: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
    seed: int = 0
    margin: float = 0.02
    close_max: float = 2.0
    far_min: float = 4.0
    box_range: tuple[float, float] = (0.05, 0.15)
    duplicate_rate: float = 0.08
    region_grid: int = 128
    max_rejections: int = 1000

    def __post_init__(self):
        if self.n_objects[0] < 1 or self.n_objects[0] > self.n_objects[1]:
            raise ValueError(f"bad n_objects range {self.n_objects}")
        if self.n_relations[0] < 1 or self.n_relations[0] > self.n_relations[1]:
            raise ValueError(f"bad n_relations range {self.n_relations}")
        if not 0.0 < self.close_max < self.far_min:
            raise ValueError("thresholds must satisfy 0 < close_max < far_min")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class Episode:
    scene: SceneGraph
    instruction: str
    truth: ParsedInstruction
    referenced_ids: tuple[int, ...]
    x_des: tuple[float, float]

    @property
    def n_relations(self) -> int:
        return len(self.truth.targets)


# ---------------------------------------------------------------------------
# Relation checkers
# ---------------------------------------------------------------------------


def check_relation(
    x: tuple[float, float], node: ObjectNode, predicate: str, config: TaskConfig
) -> bool:
    """Bounding-rule check in the +x-right / +y-up frame.

    Directional relations require clearing `margin` along their axes;
    close/far compare the center distance against multiples of the node's
    box diagonal.
    """
    dx = x[0] - node.coord[0]
    dy = x[1] - node.coord[1]
    m = config.margin
    if predicate == "left":
        return dx < -m
    if predicate == "right":
        return dx > m
    if predicate == "above":
        return dy > m
    if predicate == "below":
        return dy < -m
    if predicate == "left above":
        return dx < -m and dy > m
    if predicate == "right above":
        return dx > m and dy > m
    if predicate == "left below":
        return dx < -m and dy < -m
    if predicate == "right below":
        return dx > m and dy < -m
    distance = math.hypot(dx, dy)
    if predicate == "close":
        return distance <= config.close_max * node.diagonal
    if predicate == "far":
        return distance >= config.far_min * node.diagonal
    raise ValueError(f"unknown predicate {predicate!r}")


def _relation_masks(
    nodes: list[ObjectNode],
    relations: list[tuple[int, str]],
    config: TaskConfig,
) -> np.ndarray:
    """Boolean conjunction grid of all relations over region_grid cells."""
    grid = GridSpec(*config.workspace, config.region_grid)
    xs, ys = grid.cell_centers()
    gx = xs[np.newaxis, :]
    gy = ys[:, np.newaxis]
    mask = np.ones((config.region_grid, config.region_grid), dtype=bool)
    m = config.margin
    for node_idx, predicate in relations:
        node = nodes[node_idx]
        dx = gx - node.coord[0]
        dy = gy - node.coord[1]
        if predicate == "left":
            ok = dx < -m
        elif predicate == "right":
            ok = dx > m
        elif predicate == "above":
            ok = dy > m
        elif predicate == "below":
            ok = dy < -m
        elif predicate == "left above":
            ok = (dx < -m) & (dy > m)
        elif predicate == "right above":
            ok = (dx > m) & (dy > m)
        elif predicate == "left below":
            ok = (dx < -m) & (dy < -m)
        elif predicate == "right below":
            ok = (dx > m) & (dy < -m)
        elif predicate == "close":
            ok = np.hypot(dx, dy) <= config.close_max * node.diagonal
        elif predicate == "far":
            ok = np.hypot(dx, dy) >= config.far_min * node.diagonal
        else:
            raise ValueError(f"unknown predicate {predicate!r}")
        mask &= ok
    return mask


# ---------------------------------------------------------------------------
# Episode generation
# ---------------------------------------------------------------------------


def _place_objects(config: TaskConfig, rng: np.random.Generator) -> list[ObjectNode]:
    x_min, x_max, y_min, y_max = config.workspace
    n = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    names = list(rng.choice(OBJECT_NAMES, size=n, replace=False))
    if n >= 2 and rng.uniform() < config.duplicate_rate:
        a, b = rng.choice(n, size=2, replace=False)
        names[b] = names[a]
    placed: list[tuple[float, float, float, float]] = []
    objects = []
    for i in range(n):
        for _ in range(config.max_rejections):
            w, h = rng.uniform(config.box_range[0], config.box_range[1], size=2)
            cx = rng.uniform(x_min + w / 2, x_max - w / 2)
            cy = rng.uniform(y_min + h / 2, y_max - h / 2)
            overlap = any(
                abs(cx - px) < (w + pw) / 2 and abs(cy - py) < (h + ph) / 2
                for px, py, pw, ph in placed
            )
            if not overlap:
                placed.append((cx, cy, w, h))
                objects.append(
                    ObjectNode(
                        id=i,
                        name=str(names[i]),
                        coord=(float(cx), float(cy)),
                        box=(float(cx), float(cy), float(w), float(h)),
                    )
                )
                break
        else:
            raise GenerationError(f"could not place object {i} without overlap")
    return objects


def _phrase(predicate: str, referent: str, rng: np.random.Generator) -> str:
    if predicate == "close":
        return f"close to the {referent}"
    if predicate == "far":
        return f"far from the {referent}"
    forms = [
        f"{predicate} of the {referent}",
        f"to the {predicate} of the {referent}",
        f"the {predicate} of the {referent}",
    ]
    if predicate in ("above", "below"):
        forms.append(f"{predicate} the {referent}")
    return forms[int(rng.integers(0, len(forms)))]


def _render_instruction(
    verb: str,
    source: str,
    relations: list[tuple[str, str]],
    rng: np.random.Generator,
) -> str:
    phrases = [_phrase(pred, ref, rng) for ref, pred in relations]
    if len(phrases) == 1:
        tail = phrases[0]
    elif len(phrases) == 2:
        tail = f"{phrases[0]} and {phrases[1]}"
    else:
        tail = ", ".join(phrases[:-1]) + f", and {phrases[-1]}"
    return f"{verb} the {source} {tail}"


def generate_episode(config: TaskConfig, rng: np.random.Generator) -> Episode:
    """One self-consistent episode.

    The relation count is drawn first; scenes and relation sets are then
    rejection-sampled until the conjunction has support on the region grid
    (many relations around few objects can be jointly unsatisfiable, in
    which case a fresh scene is placed).
    """
    n_relations = int(rng.integers(config.n_relations[0], config.n_relations[1] + 1))
    scene_attempts = max(config.max_rejections // 100, 1)
    objects: list[ObjectNode] = []
    mask = None
    relations: list[tuple[int, str]] = []
    source_idx = 0
    for _ in range(scene_attempts):
        objects = _place_objects(config, rng)
        n = len(objects)
        # The source object is the one being moved; relations refer to the
        # other objects.
        source_idx = int(rng.integers(0, n))
        referent_indices = [i for i in range(n) if i != source_idx] or [source_idx]
        n_pairs = len(referent_indices) * len(config.predicates)
        if n_pairs < n_relations:
            continue
        for _ in range(100):
            flat = rng.choice(n_pairs, size=n_relations, replace=False)
            relations = [
                (
                    referent_indices[int(v) // len(config.predicates)],
                    config.predicates[int(v) % len(config.predicates)],
                )
                for v in flat
            ]
            candidate = _relation_masks(objects, relations, config)
            if candidate.any():
                mask = candidate
                break
        if mask is not None:
            break
    if mask is None:
        raise GenerationError(
            f"no satisfiable {n_relations}-relation episode after "
            f"{config.max_rejections} rejections"
        )
    scene = build_scene_graph(objects)
    grid = GridSpec(*config.workspace, config.region_grid)
    xs, ys = grid.cell_centers()
    rows, cols = np.nonzero(mask)
    pick = int(rng.integers(0, len(rows)))
    x_des = (float(xs[cols[pick]]), float(ys[rows[pick]]))
    verb = VERBS[int(rng.integers(0, len(VERBS)))]
    source = objects[source_idx].name
    targets = [(objects[idx].name, pred) for idx, pred in relations]
    instruction = _render_instruction(verb, source, targets, rng)
    truth = ParsedInstruction(action=verb, source=source, targets=tuple(targets))
    episode = Episode(
        scene=scene,
        instruction=instruction,
        truth=truth,
        referenced_ids=tuple(objects[idx].id for idx, _ in relations),
        x_des=x_des,
    )
    return episode


def episode_rng(base_seed: int, index: int) -> np.random.Generator:
    """Per-episode deterministic sub-stream.

    SeedSequence mixes (base, index) so streams from different base seeds
    never alias; a plain XOR of small integers would collide heavily.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((base_seed, index))))


def generate_episodes(config: TaskConfig, count: int) -> list[Episode]:
    return [generate_episode(config, episode_rng(config.seed, i)) for i in range(count)]


def score_grounding(
    x: tuple[float, float], episode: Episode, config: TaskConfig
) -> float:
    """Fraction of the episode's relations satisfied at x."""
    relations = list(zip(episode.referenced_ids, (p for _, p in episode.truth.targets)))
    if not relations:
        return 0.0
    hits = sum(
        check_relation(x, episode.scene.nodes[node_id], predicate, config)
        for node_id, predicate in relations
    )
    return hits / len(relations)


# ---------------------------------------------------------------------------
# Episode / training-sample serialization
# ---------------------------------------------------------------------------


def episode_to_dict(episode: Episode) -> dict:
    return {
        "scene": scene_to_dict(episode.scene),
        "instruction": episode.instruction,
        "action": episode.truth.action,
        "source": episode.truth.source,
        "targets": [[r, p] for r, p in episode.truth.targets],
        "referenced_ids": list(episode.referenced_ids),
        "x_des": list(episode.x_des),
    }


def episode_from_dict(data: dict) -> Episode:
    truth = ParsedInstruction(
        action=data["action"],
        source=data["source"],
        targets=tuple((r, p) for r, p in data["targets"]),
    )
    return Episode(
        scene=scene_from_dict(data["scene"]),
        instruction=data["instruction"],
        truth=truth,
        referenced_ids=tuple(int(i) for i in data["referenced_ids"]),
        x_des=(float(data["x_des"][0]), float(data["x_des"][1])),
    )


def write_episodes(episodes: list[Episode], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for episode in episodes:
            fh.write(json.dumps(episode_to_dict(episode)) + "\n")


def read_episodes(path: str) -> list[Episode]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(episode_from_dict(json.loads(line)))
    return episodes


def to_training_sample(episode: Episode) -> TrainingSample:
    """Ground truth per tuple: the episode's satisfying point and a one-hot
    weight on the referenced node."""
    tuples = to_relation_tuples(episode.truth)
    ordered_ids = sorted(episode.scene.nodes)
    index_of = {node_id: i for i, node_id in enumerate(ordered_ids)}
    n = len(ordered_ids)
    w_des = []
    for node_id in episode.referenced_ids:
        hot = np.zeros(n)
        hot[index_of[node_id]] = 1.0
        w_des.append(hot)
    return TrainingSample(
        scene=episode.scene,
        tuples=tuple(tuples),
        x_des=tuple(episode.x_des for _ in tuples),
        w_des=tuple(w_des),
    )


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    episodes: int
    mode: str
    parser: str
    grid_resolution: int
    mean_score: float
    success_rate: float
    per_count: dict[int, dict]
    config: TaskConfig
    mean_episode_seconds: float = field(default=0.0, compare=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        # Timing is excluded by default so reports with identical seeds are
        # byte-identical.
        out = {
            "episodes": self.episodes,
            "mode": self.mode,
            "parser": self.parser,
            "grid_resolution": self.grid_resolution,
            "mean_score": self.mean_score,
            "success_rate": self.success_rate,
            "per_count": {
                str(k): self.per_count[k] for k in sorted(self.per_count)
            },
            "config": {
                "n_objects": list(self.config.n_objects),
                "n_relations": list(self.config.n_relations),
                "predicates": list(self.config.predicates),
                "workspace": list(self.config.workspace),
                "seed": self.config.seed,
                "margin": self.config.margin,
                "close_max": self.config.close_max,
                "far_min": self.config.far_min,
                "box_range": list(self.config.box_range),
                "duplicate_rate": self.config.duplicate_rate,
                "region_grid": self.config.region_grid,
            },
        }
        if include_timing:
            out["mean_episode_seconds"] = self.mean_episode_seconds
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing=include_timing), indent=2)


def run_benchmark(
    n_episodes: int,
    mode: str = "fitted",
    config: TaskConfig | None = None,
    parser: str = "grammar",
    model: EstimatorModel | None = None,
    llm_config: LlmClientConfig | None = None,
    grid_resolution: int = 128,
) -> BenchmarkReport:
    """Generate episodes, ground each instruction, and score the argmax.

    Deterministic for a fixed config seed: per-episode randomness comes from
    seed XOR episode-index sub-streams, and timing stays out of the
    comparable report payload.
    """
    config = config or TaskConfig()
    if mode == "learned" and model is None:
        raise ValueError("learned mode requires a model")
    if parser == "llm" and llm_config is None:
        raise ValueError("llm parser requires an LlmClientConfig")
    estimator = make_estimator(mode, model)
    grid = GridSpec(*config.workspace, grid_resolution)
    scores: list[float] = []
    successes: list[bool] = []
    counts: list[int] = []
    started = time.perf_counter()
    for i in range(n_episodes):
        episode = generate_episode(config, episode_rng(config.seed, i))
        try:
            if parser == "grammar":
                parsed = parse_grammar(episode.instruction)
            elif parser == "llm":
                parsed = parse_llm(episode.instruction, llm_config)
            else:
                raise ValueError(f"unknown parser {parser!r}")
            tuples = to_relation_tuples(parsed)
            result = ground_tuples(episode.scene, tuples, estimator, grid)
        except Exception as exc:
            raise RuntimeError(
                f"episode {i} failed ({episode.instruction!r}): {exc}"
            ) from exc
        score = score_grounding(result.location, episode, config)
        scores.append(score)
        successes.append(score == 1.0)
        counts.append(episode.n_relations)
    elapsed = time.perf_counter() - started
    per_count: dict[int, dict] = {}
    for count in sorted(set(counts)):
        idx = [i for i, c in enumerate(counts) if c == count]
        per_count[count] = {
            "episodes": len(idx),
            "mean_score": float(np.mean([scores[i] for i in idx])),
            "success_rate": float(np.mean([successes[i] for i in idx])),
        }
    return BenchmarkReport(
        episodes=n_episodes,
        mode=mode,
        parser=parser,
        grid_resolution=grid_resolution,
        mean_score=float(np.mean(scores)) if scores else 0.0,
        success_rate=float(np.mean(successes)) if successes else 0.0,
        per_count=per_count,
        config=config,
        mean_episode_seconds=elapsed / max(n_episodes, 1),
    )
