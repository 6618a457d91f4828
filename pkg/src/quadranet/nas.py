"""Latency-constrained architecture search by regularized evolution.

A search space fixes a network skeleton (STEM, downsamples, head, widths)
and a number of block slots per stage. Every slot picks one candidate from
the same list: a QuadraBlock with kernel k and expansion R, or the identity.
A genome is a tuple of candidate indices, one per slot, in stage order.

Cost is the cost model's proxy latency at batch 1. A genome is feasible
when that cost is within the budget. Because the identity adds no cost,
the all-identity genome (the bare skeleton) is the cheapest point, and any
infeasible genome can be repaired by switching slots to the identity.
"""
from __future__ import annotations

import json
import os
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from . import autograd as ag
from . import costmodel
from .blocks import BlockSpec
from .data import LabeledDataset, gen_interaction_images
from .network import NetworkSpec, build
from .train import AdamWState, OptimConfig, accuracy, adamw_step, clip_gradients


class InfeasibleBudgetError(ValueError):
    """The budget is below the cost of the bare skeleton, so nothing is feasible."""

    def __init__(self, budget: float, skeleton_cost: float):
        super().__init__(f"budget {budget:.6g} is below the skeleton cost {skeleton_cost:.6g} "
                         "(the all-identity network); no candidate can satisfy it")
        self.budget = budget
        self.skeleton_cost = skeleton_cost


class MutationError(ValueError):
    """No slot has an alternative candidate to mutate to."""


IDENTITY = BlockSpec("identity")


@dataclass(frozen=True)
class SearchSpace:
    skeleton: NetworkSpec
    slots: tuple = (0, 0, 2, 0)
    kernels: tuple = (3, 5, 7)
    expansions: tuple = (2, 4)
    include_identity: bool = True
    coefficients: dict | None = None

    def __post_init__(self):
        if len(self.slots) != 4 or any(int(s) < 0 for s in self.slots):
            raise ValueError(f"slots must give four non-negative per-stage counts, got {self.slots}")
        if sum(self.slots) < 1:
            raise ValueError("search space needs at least one slot")
        if not self.candidates:
            raise ValueError("candidate list is empty")

    @property
    def candidates(self) -> list[BlockSpec]:
        cands = [BlockSpec("quadra", k, r) for k in self.kernels for r in self.expansions]
        if self.include_identity:
            cands.append(IDENTITY)
        return cands

    @property
    def num_slots(self) -> int:
        return int(sum(self.slots))

    @property
    def slot_names(self) -> list[str]:
        return [f"s{i + 1}.{j + 1}" for i, count in enumerate(self.slots) for j in range(count)]

    @property
    def size(self) -> int:
        return len(self.candidates) ** self.num_slots

    def check(self, genome) -> tuple:
        genome = tuple(int(g) for g in genome)
        n = len(self.candidates)
        if len(genome) != self.num_slots or any(not 0 <= g < n for g in genome):
            raise ValueError(f"genome {genome} does not fit {self.num_slots} slots of {n} candidates")
        return genome

    def network_spec(self, genome) -> NetworkSpec:
        genome = self.check(genome)
        cands = self.candidates
        stages, pos = [], 0
        for count in self.slots:
            stages.append([cands[g] for g in genome[pos:pos + count]])
            pos += count
        sk = self.skeleton
        return NetworkSpec(sk.base_channels, block=sk.block, slots=stages, num_classes=sk.num_classes,
                           input_size=sk.input_size, in_channels=sk.in_channels)

    def genome_string(self, genome) -> str:
        genome = self.check(genome)
        return ",".join(f"{name}={self.candidates[g].tag}" for name, g in zip(self.slot_names, genome))

    def parse_genome(self, text: str) -> tuple:
        tags = {c.tag: i for i, c in enumerate(self.candidates)}
        parts = [p.strip() for p in text.split(",") if p.strip()]
        by_slot = {}
        for part in parts:
            name, _, tag = part.partition("=")
            if name not in self.slot_names or tag not in tags:
                raise ValueError(f"bad genome entry {part!r}; slots {self.slot_names}, tags {sorted(tags)}")
            by_slot[name] = tags[tag]
        if set(by_slot) != set(self.slot_names):
            raise ValueError(f"genome {text!r} must assign every slot {self.slot_names}")
        return tuple(by_slot[name] for name in self.slot_names)

    def identity_genome(self) -> tuple:
        if not self.include_identity:
            raise ValueError("space has no identity candidate")
        return (len(self.candidates) - 1,) * self.num_slots

    def cost(self, genome) -> costmodel.CostReport:
        return costmodel.report(self.network_spec(genome), coefficients=self.coefficients)

    def skeleton_cost(self) -> float:
        """Proxy latency of the stages-free skeleton; the all-identity genome costs exactly this."""
        sk = self.skeleton
        bare = NetworkSpec(sk.base_channels, depths=(0, 0, 0, 0), block=sk.block, num_classes=sk.num_classes,
                           input_size=sk.input_size, in_channels=sk.in_channels)
        return costmodel.report(bare, coefficients=self.coefficients).proxy_latency

    def enumerate(self):
        return product(range(len(self.candidates)), repeat=self.num_slots)


@dataclass
class Candidate:
    genome: tuple
    fitness: float
    cost: costmodel.CostReport
    budget: float

    @property
    def feasible(self) -> bool:
        return self.cost.proxy_latency <= self.budget

    def to_dict(self, space: SearchSpace | None = None) -> dict:
        d = {"genome": list(self.genome), "fitness": self.fitness, "proxy_latency": self.cost.proxy_latency,
             "cost": self.cost.to_dict(include_layers=False), "budget": self.budget, "feasible": self.feasible}
        if space is not None:
            d["genome_string"] = space.genome_string(self.genome)
        return d


def mutate(space: SearchSpace, genome, seed) -> tuple:
    """Change exactly one slot, chosen uniformly among slots with alternatives,
    to a uniformly chosen different candidate."""
    genome = space.check(genome)
    n = len(space.candidates)
    if n < 2:
        raise MutationError("every slot has a single candidate; mutation is impossible")
    rng = np.random.default_rng(seed)
    slot = int(rng.integers(space.num_slots))
    choice = int(rng.integers(n - 1))
    new = choice if choice < genome[slot] else choice + 1
    child = list(genome)
    child[slot] = new
    return tuple(child)


def repair(space: SearchSpace, genome, budget, rng: np.random.Generator) -> tuple:
    """Switch random non-identity slots to the identity until the genome fits the budget."""
    genome = list(space.check(genome))
    ident = len(space.candidates) - 1
    while space.cost(genome).proxy_latency > budget:
        busy = [i for i, g in enumerate(genome) if g != ident]
        if not busy:
            raise InfeasibleBudgetError(budget, space.skeleton_cost())
        genome[busy[int(rng.integers(len(busy)))]] = ident
    return tuple(genome)


# ---------------------------------------------------------------------------
# fitness

@dataclass
class EvalConfig:
    """Proxy-task training for one fitness evaluation."""

    train_steps: int = 200
    batch_size: int = 32
    lr: float = 2e-3
    n_train: int = 400
    n_val: int = 200
    data_seed: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def make_task(space: SearchSpace, config: EvalConfig) -> tuple[LabeledDataset, LabeledDataset]:
    sk = space.skeleton
    ds = gen_interaction_images(config.n_train + config.n_val, sk.input_size, sk.num_classes,
                                seed=config.data_seed, channels=sk.in_channels)
    idx = np.arange(len(ds))
    return ds.subset(idx[:config.n_train], "train"), ds.subset(idx[config.n_train:], "val")


def evaluate(space: SearchSpace, genome, task, train_steps: int, seed: int = 0,
             batch_size: int = 32, lr: float = 2e-3) -> float:
    """Build the genome's network, train ``train_steps`` AdamW steps, return val accuracy."""
    train, val = task
    net = build(space.network_spec(genome), seed)
    config = OptimConfig(lr=lr, batch_size=batch_size, seed=seed)
    state = AdamWState(net.params)
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    for _ in range(train_steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(train))])
        idx, order = order[:batch_size], order[batch_size:]
        tape = ag.Tape()
        loss = ag.cross_entropy(net(tape, tape.leaf(train.inputs[idx])), train.labels[idx])
        ag.backward(tape, loss)
        grads = clip_gradients({k: tape.grad_of(p) for k, p in net.params.items()}, config.grad_clip_value)
        adamw_step(net.params, grads, state, config)
    return accuracy(net, val)


def thread_cap() -> int:
    """Evaluation pool size: ``QUADRANET_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("QUADRANET_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"QUADRANET_THREADS must be a positive integer, got {raw!r}") from None
        if value < 1:
            raise ValueError(f"QUADRANET_THREADS must be a positive integer, got {raw!r}")
        return value
    return os.cpu_count() or 1


class Evaluator:
    """Memoized fitness. ``fitness_fn(genome) -> float`` overrides proxy training."""

    def __init__(self, space: SearchSpace, config: EvalConfig | None = None,
                 fitness_fn: Callable | None = None, task=None):
        self.space = space
        self.config = config or EvalConfig()
        self.fitness_fn = fitness_fn
        self._task = task
        self.cache: dict[tuple, float] = {}
        self.evaluations = 0
        self._lock = threading.Lock()

    @property
    def task(self):
        if self._task is None and self.fitness_fn is None:
            self._task = make_task(self.space, self.config)
        return self._task

    def _compute(self, genome) -> float:
        if self.fitness_fn is not None:
            return float(self.fitness_fn(genome))
        c = self.config
        return evaluate(self.space, genome, self.task, c.train_steps, c.seed, c.batch_size, c.lr)

    def __call__(self, genome) -> float:
        genome = self.space.check(genome)
        with self._lock:
            if genome in self.cache:
                return self.cache[genome]
        value = self._compute(genome)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"fitness must lie in [0, 1], got {value}")
        with self._lock:
            # distinct genomes never collide; a concurrent duplicate computed the same value
            self.cache.setdefault(genome, value)
            self.evaluations += 1
            return self.cache[genome]

    def evaluate_many(self, genomes) -> list[float]:
        genomes = [self.space.check(g) for g in genomes]
        todo = list(dict.fromkeys(g for g in genomes if g not in self.cache))
        workers = min(thread_cap(), len(todo))
        if workers > 1:
            _ = self.task  # build the shared task once, before threads start
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(self, todo))
        else:
            for g in todo:
                self(g)
        return [self.cache[g] for g in genomes]


# ---------------------------------------------------------------------------
# search

def _rank_key(fitness, latency, genome):
    # higher fitness first, then cheaper, then lexicographically smaller genome
    return (-fitness, latency, genome)


@dataclass
class SearchResult:
    best: Candidate
    seed: int
    population: int
    sample: int
    generations: int
    evaluations: int
    history: list = field(default_factory=list)

    def to_dict(self, space: SearchSpace) -> dict:
        return {
            "genome": space.genome_string(self.best.genome),
            "genome_indices": list(self.best.genome),
            "fitness": self.best.fitness,
            "cost": self.best.cost.to_dict(include_layers=False),
            "proxy_latency": self.best.cost.proxy_latency,
            "budget": self.best.budget,
            "seed": self.seed,
            "population": self.population,
            "sample": self.sample,
            "generations": self.generations,
            "evaluations": self.evaluations,
            "history": [space.genome_string(g) for g in self.history],
        }

    def to_json(self, space: SearchSpace) -> str:
        return json.dumps(self.to_dict(space), indent=2)


def search(space: SearchSpace, budget: float, evaluator: Evaluator | None = None, seed: int = 0,
           population: int = 16, sample: int = 4, generations: int = 30,
           max_mutation_tries: int = 32) -> SearchResult:
    """Regularized evolution under a hard proxy-latency budget.

    The initial population is drawn uniformly and repaired into the budget.
    Each generation samples ``sample`` members and mutates the best of
    them, re-mutating while the child is infeasible or already evaluated.
    When that parent has no unseen feasible neighbour within
    ``max_mutation_tries`` draws, the other entrants and then the rest of
    the population (best first) are tried as parents; failing all of that
    a seen feasible child is reused, or a repaired one. The child is
    appended and the oldest member retired. Initial members are distinct
    where the budget allows. The best feasible genome ever evaluated is
    returned; ties go to the cheaper genome, then to the lexicographically
    smaller one.
    """
    if population < 1 or sample < 1 or generations < 0:
        raise ValueError("population and sample must be >= 1, generations >= 0")
    skeleton = space.skeleton_cost()
    if budget < skeleton:
        raise InfeasibleBudgetError(budget, skeleton)
    evaluator = evaluator or Evaluator(space)
    rng = np.random.default_rng(seed)
    n = len(space.candidates)
    latency_cache: dict[tuple, float] = {}

    def latency(g):
        if g not in latency_cache:
            latency_cache[g] = space.cost(g).proxy_latency
        return latency_cache[g]

    members = []
    for _ in range(population):
        for _ in range(max_mutation_tries):
            g = tuple(int(v) for v in rng.integers(n, size=space.num_slots))
            if latency(g) > budget:
                g = repair(space, g, budget, rng)
            if g not in members:
                break
        members.append(g)
    evaluator.evaluate_many(members)
    queue = deque(members)
    history = list(members)
    seen = set(members)

    for _ in range(generations):
        picks = rng.choice(len(queue), size=min(sample, len(queue)), replace=False)
        rank = lambda g: _rank_key(evaluator(g), latency(g), g)
        tournament = sorted({queue[i] for i in picks}, key=rank)
        parent = tournament[0]
        # the tournament winner first, then the other entrants, then the rest of the population
        parents = tournament + sorted(set(queue) - set(tournament), key=rank)
        child = fallback = None
        for p in parents:
            for _ in range(max_mutation_tries):
                trial = mutate(space, p, int(rng.integers(2 ** 63)))
                if latency(trial) <= budget:
                    if trial not in seen:
                        child = trial
                        break
                    fallback = fallback or trial
            if child is not None:
                break
        child = child or fallback
        if child is None:
            child = repair(space, mutate(space, parent, int(rng.integers(2 ** 63))), budget, rng)
        evaluator(child)
        queue.append(child)
        queue.popleft()
        history.append(child)
        seen.add(child)

    best = min(set(history), key=lambda g: _rank_key(evaluator(g), latency(g), g))
    cand = Candidate(best, evaluator(best), space.cost(best), budget)
    assert cand.feasible
    return SearchResult(cand, seed, population, sample, generations, evaluator.evaluations, history)


def exhaustive(space: SearchSpace, budget: float, evaluator: Evaluator) -> Candidate:
    """Best feasible genome by enumeration, with the same tie-break as :func:`search`."""
    skeleton = space.skeleton_cost()
    if budget < skeleton:
        raise InfeasibleBudgetError(budget, skeleton)
    best = None
    for g in space.enumerate():
        lat = space.cost(g).proxy_latency
        if lat > budget:
            continue
        key = _rank_key(evaluator(g), lat, g)
        if best is None or key < best[0]:
            best = (key, g)
    g = best[1]
    return Candidate(g, evaluator(g), space.cost(g), budget)
