"""Black-box refinement with a steady-state microbial genetic algorithm.

A population of perturbations lives inside the L-inf ball of radius
``epsilon`` and on the support of the white-box edge mask. Each generation
draws two distinct members; the one with lower fitness (probability margin
of the true class, lower is better) wins and infects the loser gene by gene
with probability ``crossover_rate``; the infected loser is mutated and
re-evaluated with a single target query. The run stops on the first
misclassification or when the query budget is exhausted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .models import QueryBudgetExhausted, QueryOracle

logger = logging.getLogger(__name__)

__all__ = [
    "MgaConfig",
    "Genome",
    "AttackResult",
    "margin",
    "project",
    "check_genome",
    "init_population",
    "random_population",
    "fitness",
    "tournament_select",
    "crossover_infect",
    "mutate",
    "run_mga",
    "run_mga_batch",
    "MicrobialGAAttack",
]


@dataclass(frozen=True)
class MgaConfig:
    population_size: int = 8
    crossover_rate: float = 0.5
    mutation_rate: float = 0.005
    mutation_scale: float = 1.0
    query_cap: int = 50_000
    rng_seed: int = 0
    init: str = "seed"  # "seed" or "random"

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.query_cap < self.population_size:
            raise ValueError("query_cap must be >= population_size")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.mutation_scale < 0:
            raise ValueError("mutation_scale must be non-negative")
        if self.init not in ("seed", "random"):
            raise ValueError("init must be 'seed' or 'random'")


@dataclass
class Genome:
    delta: np.ndarray
    fitness: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    generations: int
    adv_class: int
    y: int
    best_fitness: float
    trace: list[float] = field(default_factory=list, repr=False)
    delta: np.ndarray | None = field(default=None, repr=False)
    x: np.ndarray | None = field(default=None, repr=False)
    image_id: str = ""

    @property
    def x_adv(self) -> np.ndarray | None:
        if not self.success or self.delta is None:
            return None
        return np.clip(self.x + self.delta, 0, 1)

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "y": self.y,
            "success": self.success,
            "queries_used": self.queries_used,
            "generations": self.generations,
            "adv_class": self.adv_class,
            "best_fitness": self.best_fitness,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def margin(proba: np.ndarray, y: int) -> float:
    """``p_y - max_{c != y} p_c``; negative means misclassified."""
    p = np.asarray(proba, dtype=np.float64)
    others = np.delete(p, y)
    return float(p[y] - others.max())


def _support(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    supp = np.asarray(mask) > 0
    if supp.ndim == like.ndim - 1:
        supp = np.broadcast_to(supp[None], like.shape)
    return supp


def project(delta: np.ndarray, x: np.ndarray, mask: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the eps-ball and the [0, 1] box around ``x``; zero off the mask."""
    eps = delta.dtype.type(epsilon)
    out = np.clip(delta, -eps, eps)
    out = np.clip(out, -x, 1 - x)
    out[~_support(mask, out)] = 0
    return out


def check_genome(delta, x, mask, epsilon, atol: float = 1e-6) -> None:
    """Raise ``ValueError`` if ``delta`` breaks ball, box or support constraints."""
    delta = np.asarray(delta)
    if np.abs(delta).max(initial=0) > epsilon + atol:
        raise ValueError("perturbation leaves the epsilon ball")
    xa = x + delta
    if xa.min(initial=0) < -atol or xa.max(initial=1) > 1 + atol:
        raise ValueError("perturbed image leaves [0, 1]")
    if np.any(delta[~_support(mask, delta)] != 0):
        raise ValueError("perturbation is non-zero outside the mask")


def mutate(genome: Genome, cfg: MgaConfig, mask, x, epsilon: float, rng) -> Genome:
    """Add uniform noise to a random subset of mask pixels, then re-project."""
    delta = genome.delta
    hit = rng.random(delta.shape) < cfg.mutation_rate
    noise = rng.uniform(-cfg.mutation_scale * epsilon, cfg.mutation_scale * epsilon, delta.shape)
    hit &= _support(mask, delta)
    if not hit.any():
        return Genome(delta.copy())
    out = delta + np.where(hit, noise, 0).astype(delta.dtype)
    return Genome(project(out, x, mask, epsilon))


def init_population(seed_delta, cfg: MgaConfig, mask, x, epsilon: float, rng) -> list[Genome]:
    """Seed first, then ``population_size - 1`` mutants of it.

    The seed is re-projected after the check, which only removes float
    rounding (a seed computed as ``x_hat - x`` can overshoot eps by an ulp).
    """
    seed_delta = np.asarray(seed_delta)
    check_genome(seed_delta, x, mask, epsilon)
    first = Genome(project(seed_delta.copy(), x, mask, epsilon))
    return [first] + [mutate(first, cfg, mask, x, epsilon, rng) for _ in range(cfg.population_size - 1)]


def random_population(cfg: MgaConfig, mask, x, epsilon: float, rng) -> list[Genome]:
    """Uniform draws from the eps-ball on the mask support (unseeded baseline)."""
    pop = []
    for _ in range(cfg.population_size):
        d = rng.uniform(-epsilon, epsilon, x.shape).astype(x.dtype)
        pop.append(Genome(project(d, x, mask, epsilon)))
    return pop


def _candidate(x: np.ndarray, genome: Genome) -> np.ndarray:
    return np.clip(x + genome.delta, 0, 1)


def fitness(oracle: QueryOracle, x, genome: Genome, y: int) -> float:
    """Margin of the target's probabilities on ``x + delta``; cached on the genome."""
    if genome.fitness is None:
        genome.fitness = margin(oracle.query(_candidate(x, genome)), y)
    return genome.fitness


def tournament_select(population: list[Genome], rng) -> tuple[int, int]:
    """Two distinct uniform indices; lower fitness wins, ties go to the lower index."""
    n = len(population)
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    fi, fj = population[i].fitness, population[j].fitness
    if fi < fj or (fi == fj and i < j):
        return i, j
    return j, i


def crossover_infect(winner: Genome, loser: Genome, rate: float, rng) -> Genome:
    """Copy each gene from the winner with probability ``rate``, else keep the loser's."""
    if winner.delta.shape != loser.delta.shape:
        raise ValueError("genome shapes differ")
    take = rng.random(winner.delta.shape) < rate
    return Genome(np.where(take, winner.delta, loser.delta))


class _Run:
    """Mutable state of one image's attack inside the lockstep driver."""

    def __init__(self, x, y, seed_delta, mask, oracle, cfg, epsilon, image_id, index):
        self.x, self.y, self.mask, self.oracle = x, int(y), mask, oracle
        self.cfg, self.epsilon, self.image_id = cfg, epsilon, image_id
        self.rng = np.random.default_rng([cfg.rng_seed, index])
        if cfg.init == "seed":
            self.population = init_population(seed_delta, cfg, mask, x, epsilon, self.rng)
        else:
            self.population = random_population(cfg, mask, x, epsilon, self.rng)
        self.next_init = 0
        self.slot = -1
        self.queries = 0
        self.generations = 0
        self.trace: list[float] = []
        self.best = np.inf
        self.result: AttackResult | None = None

    def propose(self) -> np.ndarray | None:
        """Pick the genome to evaluate next, or finish when out of budget."""
        if self.oracle.remaining < 1:
            self._finish(False, -1)
            return None
        if self.next_init < len(self.population):
            self.slot = self.next_init
            self.next_init += 1
        else:
            w, lo = tournament_select(self.population, self.rng)
            child = crossover_infect(self.population[w], self.population[lo], self.cfg.crossover_rate, self.rng)
            child = mutate(child, self.cfg, self.mask, self.x, self.epsilon, self.rng)
            self.population[lo] = child
            self.slot = lo
            self.generations += 1
        return _candidate(self.x, self.population[self.slot])

    def accept(self, proba: np.ndarray) -> None:
        self.queries += 1
        g = self.population[self.slot]
        g.fitness = margin(proba, self.y)
        self.best = min(self.best, g.fitness)
        self.trace.append(self.best)
        pred = int(np.argmax(proba))
        if pred != self.y:
            self._finish(True, pred, g)

    def _finish(self, success: bool, adv_class: int, winner: Genome | None = None) -> None:
        if winner is None:
            evaluated = [g for g in self.population if g.evaluated]
            winner = min(evaluated, key=lambda g: g.fitness) if evaluated else self.population[0]
        self.result = AttackResult(
            success=success,
            queries_used=self.queries,
            generations=self.generations,
            adv_class=adv_class,
            y=self.y,
            best_fitness=float(self.best),
            trace=self.trace,
            delta=winner.delta,
            x=self.x,
            image_id=self.image_id,
        )


def run_mga_batch(
    X,
    y,
    seed_deltas,
    masks,
    oracles: list[QueryOracle],
    cfg: MgaConfig = MgaConfig(),
    epsilon: float = 8 / 255,
    image_ids=None,
    indices=None,
) -> list[AttackResult]:
    """Run one independent attack per image, stepping all of them together.

    Image ``i`` draws from its own generator seeded by ``(rng_seed, indices[i])``
    (``indices`` defaults to ``range(len(X))``) and
    charges only ``oracles[i]``, so it follows the same search as a solo run
    with the same index. When all oracles wrap one model, each step costs a
    single batched forward pass; batched and single-image float32 forwards
    can differ in the last bits, so the two runs agree up to that rounding.
    """
    X = np.asarray(X)
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(X))]
    streams = list(indices) if indices is not None else list(range(len(X)))
    runs = [
        _Run(X[i], y[i], None if seed_deltas is None else seed_deltas[i], masks[i], oracles[i], cfg, epsilon, ids[i], streams[i])
        for i in range(len(X))
    ]
    active = list(runs)
    while active:
        proposals = []
        for r in active:
            cand = r.propose()
            if cand is not None:
                proposals.append((r, cand))
        if not proposals:
            break
        batch = np.stack([c for _, c in proposals])
        probs = _query_all([r.oracle for r, _ in proposals], batch)
        for (r, _), p in zip(proposals, probs):
            r.accept(p)
        active = [r for r in active if r.result is None]
    return [r.result for r in runs]


def _query_all(oracles, batch):
    from .models import query_many

    model = oracles[0].model
    if all(isinstance(o, QueryOracle) and o.model is model for o in oracles) and len(set(map(id, oracles))) == len(oracles):
        return query_many(oracles, batch)
    return [o.query(img) for o, img in zip(oracles, batch)]


def run_mga(x, y: int, seed_delta, mask, oracle: QueryOracle, cfg: MgaConfig = MgaConfig(), epsilon: float = 8 / 255, index: int = 0) -> AttackResult:
    """Single-image attack; matches entry ``index`` of a batched run."""
    run = _Run(np.asarray(x), y, seed_delta, mask, oracle, cfg, epsilon, str(index), index)
    while run.result is None:
        cand = run.propose()
        if cand is None:
            break
        try:
            proba = oracle.query(cand)
        except QueryBudgetExhausted:
            run._finish(False, -1)
            break
        run.accept(proba)
    return run.result


class MicrobialGAAttack(BaseEstimator):
    """Score-based black-box attack against ``oracle_model``.

    ``attack`` takes the benign images, labels, white-box seeds (or
    ``None`` for random initialization) and per-image masks, and returns
    one :class:`AttackResult` per image. Each image gets a fresh oracle
    with ``query_cap`` queries.
    """

    def __init__(
        self,
        oracle_model=None,
        epsilon=8 / 255,
        population_size=8,
        crossover_rate=0.5,
        mutation_rate=0.005,
        mutation_scale=1.0,
        query_cap=50_000,
        init="seed",
        random_state=0,
    ):
        self.oracle_model = oracle_model
        self.epsilon = epsilon
        self.population_size = population_size
        self.crossover_rate = crossover_rate
        self.mutation_rate = mutation_rate
        self.mutation_scale = mutation_scale
        self.query_cap = query_cap
        self.init = init
        self.random_state = random_state

    @property
    def config(self) -> MgaConfig:
        return MgaConfig(
            self.population_size,
            self.crossover_rate,
            self.mutation_rate,
            self.mutation_scale,
            self.query_cap,
            self.random_state,
            self.init,
        )

    def fit(self, X=None, y=None):
        return self

    def attack(self, X, y, seed_deltas, masks, image_ids=None) -> list[AttackResult]:
        cfg = self.config
        oracles = [QueryOracle(self.oracle_model, cfg.query_cap) for _ in range(len(X))]
        self.oracles_ = oracles
        return run_mga_batch(X, y, seed_deltas, masks, oracles, cfg, self.epsilon, image_ids)
