"""Gain search: constriction PSO with conditional DE refinement.

The search walks gain matrices flattened to vectors of dimension
m*p. Candidate quality is the certified performance bound delta from
the LMI solve; anything the solver cannot certify counts as infeasible
and is never stored. Differential evolution (rand/1/bin) acts on the
set of cognitive experiences, and only for particles whose cognitive
best improved in the current generation, so the expensive extra solves
are spent where the swarm is already making progress.

Evaluation order is semantically significant: the population best is
refreshed inside the particle loop (asynchronous update), so particle
i+1 chases a best that particle i may have just set. Keep the loop
sequential.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import lmi, sdp
from .errors import ConfigError, StartupError
from .plant import PolytopicPlant

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvolveConfig:
    """Knobs of the outer search.

    The velocity update uses the constriction form: the whole update is
    damped by `constriction` after the cognitive and social pulls are
    added. Defaults reproduce the damping that keeps the swarm stable
    for pull weights summing above 4.

    swarm_size must be at least 4: DE mutation needs the target plus
    three distinct partners.
    """

    swarm_size: int = 5
    max_generations: int = 10
    constriction: float = 0.72984
    cognitive_pull: float = 2.05
    social_pull: float = 2.05
    de_scale: float = 0.5
    de_crossover: float = 0.9
    search_box: tuple[float, float] = (-10.0, 10.0)
    resample_cap: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.swarm_size < 4:
            raise ConfigError(
                f"swarm_size is {self.swarm_size}; differential evolution "
                "needs a target plus three distinct partners (>= 4)"
            )
        if self.max_generations < 0:
            raise ConfigError("max_generations must be nonnegative")
        if not 0.0 < self.de_scale <= 2.0:
            raise ConfigError(f"de_scale {self.de_scale} outside (0, 2]")
        if not 0.0 <= self.de_crossover <= 1.0:
            raise ConfigError(f"de_crossover {self.de_crossover} outside [0, 1]")
        if self.constriction <= 0.0:
            raise ConfigError("constriction must be positive")
        if self.cognitive_pull < 0.0 or self.social_pull < 0.0:
            raise ConfigError("pull weights must be nonnegative")
        if self.resample_cap < 1:
            raise ConfigError("resample_cap must be at least 1")
        lo, hi = self.search_box
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ConfigError(f"search_box {self.search_box} is not a finite interval")


@dataclass
class Particle:
    """Position, velocity, and the best point this particle has seen.

    best_fitness only ever decreases; it is the record the DE selection
    competes against.
    """

    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float
    fitness: float = math.inf


@dataclass
class Swarm:
    particles: list[Particle]
    best_position: np.ndarray
    best_fitness: float
    rng: np.random.Generator


@dataclass(frozen=True)
class GenerationRecord:
    """One trace row plus the instrumentation counters the tests audit."""

    generation: int
    best_fitness: float
    best_gain: np.ndarray          # flattened, a copy
    improvements: int = 0          # cognitive bests that improved this generation
    de_rounds: int = 0             # DE rounds actually run this generation
    evaluations: int = 0           # cumulative fitness evaluations so far


@dataclass(frozen=True)
class RunResult:
    best_gain: np.ndarray          # m x p
    best_fitness: float
    records: tuple[GenerationRecord, ...]
    evaluations: int


def fitness(gain, plant: PolytopicPlant, spec: lmi.LmiSpec,
            settings: sdp.SdpSettings | None = None) -> float:
    """Certified performance bound of one gain, or +inf.

    Infeasible, uncertified, and numerically failed solves all collapse
    to +inf: the search must never store a gain the solver did not
    certify, and +inf keeps the selection ordering total.
    """
    d = plant.dims
    k = np.asarray(gain, dtype=float).reshape(d.m, d.p)
    problem = lmi.assemble(plant, k, spec)
    sol = sdp.solve(problem, settings)
    if sol.status is sdp.SdpStatus.OPTIMAL:
        return float(sol.objective_value)
    if sol.status is sdp.SdpStatus.NUMERICAL_FAILURE:
        log.debug("solver failed at gain %s: %s", k.ravel(), sol.reason)
    return math.inf


def pso_step(p: Particle, best: np.ndarray, cfg: EvolveConfig,
             rng: np.random.Generator) -> Particle:
    """One velocity-then-position update, clamped to the search box.

    The random pulls are drawn per component. A component whose clamp
    binds gets its velocity zeroed, otherwise the particle keeps
    slamming into the same wall each generation.
    """
    d = p.position.size
    r1 = rng.random(d)
    r2 = rng.random(d)
    vel = cfg.constriction * (
        p.velocity
        + cfg.cognitive_pull * r1 * (p.best_position - p.position)
        + cfg.social_pull * r2 * (best - p.position)
    )
    pos = p.position + vel
    lo, hi = cfg.search_box
    clipped = np.clip(pos, lo, hi)
    vel = np.where(clipped == pos, vel, 0.0)
    return Particle(
        position=clipped,
        velocity=vel,
        best_position=p.best_position,
        best_fitness=p.best_fitness,
        fitness=p.fitness,
    )


def feasibility_resample(candidate: np.ndarray,
                         evaluate: Callable[[np.ndarray], float],
                         regenerate: Callable[[], np.ndarray],
                         cap: int):
    """First feasible candidate from repeated regeneration, or None.

    Spends at most `cap` evaluations, counting the one on the incoming
    candidate. Returns (candidate, fitness) so the caller never pays a
    second solve for the accepted point.
    """
    for _ in range(cap):
        f = evaluate(candidate)
        if math.isfinite(f):
            return candidate, f
        candidate = regenerate()
    return None


def de_mutate(experiences: Sequence[np.ndarray], i: int, scale: float,
              rng: np.random.Generator) -> np.ndarray:
    """rand/1 donor: base plus one scaled difference, partners distinct
    and never the target itself."""
    others = np.array([j for j in range(len(experiences)) if j != i])
    r1, r2, r3 = rng.choice(others, size=3, replace=False)
    return experiences[r1] + scale * (experiences[r2] - experiences[r3])


def de_crossover(target: np.ndarray, donor: np.ndarray, rate: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover with one forced donor component.

    The mask is drawn first, then the forced index, so fixed generator
    streams give reproducible trials. The forced component guarantees
    the trial differs from the target whenever the donor does.
    """
    d = target.size
    mask = rng.random(d) < rate
    mask[int(rng.integers(d))] = True
    return np.where(mask, donor, target)


def de_select(p: Particle, trial: np.ndarray, trial_fitness: float,
              swarm: Swarm) -> bool:
    """Replace the cognitive experience iff the trial is strictly better.

    Also refreshes the population best immediately (asynchronous, same
    as the PSO loop). Returns whether a replacement happened.
    """
    if not trial_fitness < p.best_fitness:
        return False
    p.best_position = trial.copy()
    p.best_fitness = trial_fitness
    if trial_fitness < swarm.best_fitness:
        swarm.best_position = trial.copy()
        swarm.best_fitness = trial_fitness
    return True


def run(plant: PolytopicPlant, spec: lmi.LmiSpec, cfg: EvolveConfig,
        settings: sdp.SdpSettings | None = None,
        on_generation: Optional[Callable[[GenerationRecord, Swarm], None]] = None,
        ) -> RunResult:
    """Full search: feasible initialization, then per generation a PSO
    move per particle (resampled until feasible, with give-up) and a
    conditional DE round for every particle whose cognitive best
    improved.

    Give-up semantics, chosen so the loop always terminates:
    * init: a particle that finds no feasible position in resample_cap
      uniform draws raises StartupError.
    * PSO move: after resample_cap infeasible moves (each with fresh
      random pulls) the particle keeps its old position and its
      velocity is zeroed.
    * DE trial: after resample_cap infeasible trials (fresh partners
      and mask each time) the selection is skipped.

    All randomness flows through one generator seeded from cfg.seed, so
    equal inputs give bitwise-equal traces. Records are emitted for
    generation 0 (the initialized swarm) through max_generations.
    """
    d = plant.dims
    dim = d.m * d.p
    lo, hi = cfg.search_box
    rng = np.random.default_rng(cfg.seed)
    evaluations = 0

    def evaluate(pos: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        return fitness(pos, plant, spec, settings)

    def uniform() -> np.ndarray:
        return rng.uniform(lo, hi, dim)

    particles: list[Particle] = []
    for i in range(cfg.swarm_size):
        hit = feasibility_resample(uniform(), evaluate, uniform, cfg.resample_cap)
        if hit is None:
            raise StartupError(
                f"initialization of particle {i} found no feasible gain in "
                f"{cfg.resample_cap} draws over {cfg.search_box}"
            )
        pos, f = hit
        particles.append(Particle(
            position=pos,
            velocity=np.zeros(dim),
            best_position=pos.copy(),
            best_fitness=f,
            fitness=f,
        ))

    leader = min(particles, key=lambda p: p.best_fitness)
    swarm = Swarm(
        particles=particles,
        best_position=leader.best_position.copy(),
        best_fitness=leader.best_fitness,
        rng=rng,
    )

    records = [GenerationRecord(
        generation=0,
        best_fitness=swarm.best_fitness,
        best_gain=swarm.best_position.copy(),
        evaluations=evaluations,
    )]
    if on_generation is not None:
        on_generation(records[0], swarm)

    for gen in range(1, cfg.max_generations + 1):
        improvements = 0
        de_rounds = 0
        for i, p in enumerate(swarm.particles):
            moved = None
            for _ in range(cfg.resample_cap):
                trial = pso_step(p, swarm.best_position, cfg, rng)
                f = evaluate(trial.position)
                if math.isfinite(f):
                    trial.fitness = f
                    moved = trial
                    break
            if moved is None:
                # keep the last feasible position; a dead velocity would
                # just replay the same infeasible move next generation
                p.velocity = np.zeros(dim)
                continue
            swarm.particles[i] = moved
            p = moved
            improved = False
            if p.fitness < p.best_fitness:
                p.best_position = p.position.copy()
                p.best_fitness = p.fitness
                improved = True
                improvements += 1
                if p.best_fitness < swarm.best_fitness:
                    swarm.best_position = p.best_position.copy()
                    swarm.best_fitness = p.best_fitness
            if not improved:
                continue
            # one DE round, only for the particle that just improved
            de_rounds += 1
            experiences = [q.best_position for q in swarm.particles]
            hit = None
            for _ in range(cfg.resample_cap):
                donor = de_mutate(experiences, i, cfg.de_scale, rng)
                trial_pos = np.clip(
                    de_crossover(p.best_position, donor, cfg.de_crossover, rng),
                    lo, hi)
                f = evaluate(trial_pos)
                if math.isfinite(f):
                    hit = (trial_pos, f)
                    break
            if hit is not None:
                de_select(p, hit[0], hit[1], swarm)
        records.append(GenerationRecord(
            generation=gen,
            best_fitness=swarm.best_fitness,
            best_gain=swarm.best_position.copy(),
            improvements=improvements,
            de_rounds=de_rounds,
            evaluations=evaluations,
        ))
        if on_generation is not None:
            on_generation(records[-1], swarm)

    return RunResult(
        best_gain=swarm.best_position.reshape(d.m, d.p).copy(),
        best_fitness=swarm.best_fitness,
        records=tuple(records),
        evaluations=evaluations,
    )
