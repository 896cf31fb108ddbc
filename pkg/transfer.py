"""Learning unseen tasks on a frozen synergy model, and the sparse-reward exploration benchmark."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

import discorl
from errors import ConfigurationError, DecoderMutatedError
from seeding import derive_seed
from synergy import SynergyModel

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class TransferResult:
    task_name: str
    curves: list = field(default_factory=list)
    first_reward_step: object = None
    success: object = None
    baseline_first_reward_step: object = None
    auc: float = 0.0
    final_return: float = 0.0
    reference_return: object = None
    env_steps: int = 0
    decoder_digest: str = ""
    seed: int = 0


@dataclass
class SparseBenchResult:
    synergy: list
    full: list
    budget_steps: int

    @property
    def synergy_median(self):
        return median_steps([r.first_reward_step for r in self.synergy])

    @property
    def full_median(self):
        return median_steps([r.first_reward_step for r in self.full])

    def rows(self):
        """One row per paired seed: (seed, synergy step, full-dim step)"""
        return [(s.seed, s.first_reward_step, f.first_reward_step) for s, f in zip(self.synergy, self.full)]


def median_steps(values):
    """Median with None (no reward within budget) ordered after every number"""
    if not values:
        return None
    ordered = sorted(values, key=lambda v: (v is None, v if v is not None else 0))
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    low, high = ordered[mid - 1], ordered[mid]
    if low is None or high is None:
        return None
    return (low + high) / 2.0


def area_under_curve(training_returns):
    """Mean per-iteration training return (area normalized by iteration count)"""
    if not training_returns:
        return 0.0
    return float(np.mean([np.mean(r) for r in training_returns]))


def transfer_train(frozen, new_task, cfg, reference_return=None, training_tasks=(), out_dir=None):
    """Fresh single head on z-space through a bit-frozen decoder; only the alpha1 bonus stays on"""
    if not isinstance(frozen, SynergyModel) or not frozen.frozen:
        raise ConfigurationError("transfer_train needs a frozen SynergyModel")
    if any(t is new_task or t.name == new_task.name for t in training_tasks):
        raise ConfigurationError(f"{new_task.name} is part of the training set")
    if frozen.d != new_task.d:
        raise ConfigurationError(f"Decoder d={frozen.d} does not match task {new_task.name} d={new_task.d}")
    before = frozen.digest()
    transfer_cfg = cfg.replace(alpha2=0.0, alpha3=0.0, decoder_sampling="deterministic")
    result = discorl.train([new_task], transfer_cfg, model=frozen, out_dir=out_dir)
    after = frozen.digest()
    if after != before:
        logger.error(f"Frozen decoder changed while learning {new_task.name}: {before} -> {after}")
        raise DecoderMutatedError(f"Decoder hash changed during transfer to {new_task.name}")

    final = result.final_returns[0]
    success = discorl.success_flags([final], [reference_return], cfg.success_fraction)[0]
    curves = [{"iteration": row["iteration"], "eval_return": row["eval_return"],
               "train_return": result.training_returns[row["iteration"]][0]} for row in result.curves]
    logger.info(f"Transfer to {new_task.name}: return {final:.4f}, first reward step "
                f"{result.first_reward_step}, success {success}")
    return TransferResult(new_task.name, curves, result.first_reward_step, success, None,
                          area_under_curve(result.training_returns), final, reference_return,
                          result.env_steps, after, cfg.seed)


def sparse_benchmark(frozen, sparse_task, cfg, budget_steps, seeds=5):
    """Paired-seed runs of a synergy agent and a full-dimensional agent on a sparse goal task"""
    if sparse_task.kind != "sparse_valve":
        raise ConfigurationError(f"sparse_benchmark needs a sparse_valve task, got {sparse_task.kind}")
    if budget_steps < 0 or seeds < 1:
        raise ConfigurationError("budget_steps must be >= 0 and seeds >= 1")
    steps_per_iteration = cfg.episodes_per_task * sparse_task.horizon
    iterations = math.ceil(budget_steps / steps_per_iteration)
    identity = SynergyModel.identity(sparse_task.d)
    synergy_runs, full_runs = [], []
    for i in range(seeds):
        run_cfg = cfg.replace(seed=derive_seed(cfg.seed, "sparse_bench", i), iterations=iterations,
                              early_stop=False)
        logger.info(f"[{i + 1}/{seeds}] Sparse benchmark seed {run_cfg.seed}: {iterations} iterations per arm")
        arms = []
        for model in (frozen, identity):
            run = transfer_train(model, sparse_task, run_cfg)
            if run.first_reward_step is not None and run.first_reward_step >= budget_steps:
                run.first_reward_step = None
            run.seed = i
            arms.append(run)
        arms[0].baseline_first_reward_step = arms[1].first_reward_step
        synergy_runs.append(arms[0])
        full_runs.append(arms[1])
    bench = SparseBenchResult(synergy_runs, full_runs, budget_steps)
    logger.info(f"Sparse benchmark medians: synergy {bench.synergy_median}, full-dim {bench.full_median}")
    return bench
