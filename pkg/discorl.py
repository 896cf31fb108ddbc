"""Maximum-entropy multi-task PPO over the composed policy pi_task(z|s,n) p(a|z).

One training iteration: collect H episodes per task with the current policy,
fit the discriminator on the fresh (z, a) pairs, then run clipped-surrogate
PPO on the latent heads and, when the decoder is trainable, an
advantage-weighted log-likelihood step on the decoder.
"""
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

import diffnet as dn
import envs
from config import TRAIN_DEFAULTS
from errors import ConfigurationError, DivergenceError, DomainError, StaleBatchError
from seeding import derive_seed, make_rng
from synergy import Discriminator, SynergyModel, TaskPolicy, act, disc_update

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = TRAIN_DEFAULTS['gamma']
    gae_lambda: float = TRAIN_DEFAULTS['gae_lambda']
    clip_eps: float = TRAIN_DEFAULTS['clip_eps']
    alpha1: float = TRAIN_DEFAULTS['alpha1']
    alpha2: float = TRAIN_DEFAULTS['alpha2']
    alpha3: float = TRAIN_DEFAULTS['alpha3']
    lr_policy: float = TRAIN_DEFAULTS['lr_policy']
    lr_decoder: float = TRAIN_DEFAULTS['lr_decoder']
    lr_disc: float = TRAIN_DEFAULTS['lr_disc']
    episodes_per_task: int = TRAIN_DEFAULTS['episodes_per_task']
    ppo_epochs: int = TRAIN_DEFAULTS['ppo_epochs']
    minibatch: int = TRAIN_DEFAULTS['minibatch']
    iterations: int = TRAIN_DEFAULTS['iterations']
    seed: int = 0
    b: int = TRAIN_DEFAULTS['b']
    decoder_form: str = TRAIN_DEFAULTS['decoder_form']
    decoder_sampling: str = TRAIN_DEFAULTS['decoder_sampling']
    single_head: bool = TRAIN_DEFAULTS['single_head']
    eval_every: int = TRAIN_DEFAULTS['eval_every']
    eval_episodes: int = TRAIN_DEFAULTS['eval_episodes']
    disc_epochs: int = TRAIN_DEFAULTS['disc_epochs']
    value_coef: float = TRAIN_DEFAULTS['value_coef']
    max_grad_norm: float = TRAIN_DEFAULTS['max_grad_norm']
    max_ratio: float = TRAIN_DEFAULTS['max_ratio']
    early_stop: bool = TRAIN_DEFAULTS['early_stop']
    early_stop_window: int = TRAIN_DEFAULTS['early_stop_window']
    early_stop_slope: float = TRAIN_DEFAULTS['early_stop_slope']
    success_fraction: float = TRAIN_DEFAULTS['success_fraction']
    bound_samples: int = TRAIN_DEFAULTS['bound_samples']
    bound_states: int = TRAIN_DEFAULTS['bound_states']
    reference_returns: dict = field(default_factory=dict)
    policy_hidden: tuple = tuple(TRAIN_DEFAULTS['policy_hidden'])
    decoder_hidden: tuple = tuple(TRAIN_DEFAULTS['decoder_hidden'])
    disc_hidden: tuple = tuple(TRAIN_DEFAULTS['disc_hidden'])
    activation: str = TRAIN_DEFAULTS['activation']

    def __post_init__(self):
        self.policy_hidden = tuple(self.policy_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        self.reference_returns = dict(self.reference_returns)
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigurationError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ConfigurationError("clip_eps must be positive")
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigurationError("alpha weights must be non-negative")
        if self.episodes_per_task < 1 or self.ppo_epochs < 0 or self.minibatch < 1 or self.iterations < 0:
            raise ConfigurationError("episode, epoch, minibatch and iteration counts must be valid")
        if self.decoder_sampling not in ("stochastic", "deterministic"):
            raise ConfigurationError(f"Unknown decoder_sampling: {self.decoder_sampling}")
        if self.eval_every < 0 or self.eval_episodes < 1:
            raise ConfigurationError("eval_every must be >= 0 and eval_episodes >= 1")

    @classmethod
    def from_dict(cls, doc, seed=0):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigurationError(f"Unknown train keys: {unknown}")
        return cls(**{**doc, 'seed': doc.get('seed', seed)})

    def to_dict(self):
        doc = dataclasses.asdict(self)
        for key in ('policy_hidden', 'decoder_hidden', 'disc_hidden'):
            doc[key] = list(doc[key])
        return doc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class TaskRollout:
    """H lockstep episodes of one task; per-step arrays are time-major (T, H, ...)"""
    task_index: int
    task_name: str
    obs: np.ndarray
    z: np.ndarray
    a: np.ndarray
    r_env: np.ndarray
    h_z: np.ndarray
    disc_lp: np.ndarray
    h_a: np.ndarray
    r_hat: np.ndarray
    logp: np.ndarray
    value: np.ndarray
    done: np.ndarray

    @property
    def num_steps(self):
        return self.r_env.size

    @property
    def episode_returns(self):
        return self.r_env.sum(axis=0)

    def flat(self, name):
        array = getattr(self, name)
        return array.reshape((-1,) + array.shape[2:])


@dataclass
class RolloutBatch:
    segments: list
    seed: int = 0

    @property
    def num_steps(self):
        return int(sum(s.num_steps for s in self.segments))

    def all_flat(self, name):
        return np.concatenate([s.flat(name) for s in self.segments], axis=0)


@dataclass
class PpoReport:
    policy_surrogate: float = 0.0
    value_loss: float = 0.0
    decoder_logprob: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    head_counts: dict = field(default_factory=dict)


@dataclass
class BoundGap:
    lhs: object
    rhs: float
    gap: object
    stderr: float
    lhs_available: bool


@dataclass
class PpoOptimizers:
    policy: dn.Adam
    decoder: dn.Adam

    @classmethod
    def create(cls, cfg):
        return cls(dn.Adam(cfg.lr_policy), dn.Adam(cfg.lr_decoder))


@dataclass
class TrainResult:
    policy: TaskPolicy
    model: SynergyModel
    disc: Discriminator
    tasks: list
    curves: list = field(default_factory=list)
    final_returns: list = field(default_factory=list)
    z_samples: list = field(default_factory=list)
    iterations_run: int = 0
    env_steps: int = 0
    first_reward_step: object = None
    training_returns: list = field(default_factory=list)


# ------------------------------------------------------------- rewards

def extended_reward(r_env, h_z, disc_lp, h_a, cfg):
    """r + alpha1 H(pi_z) + alpha2 log q(z|a) + alpha3 H(p_a)"""
    return r_env + cfg.alpha1 * h_z + cfg.alpha2 * disc_lp + cfg.alpha3 * h_a


def gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimation over time-major arrays; bootstrap value 0 after the last step"""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ConfigurationError(f"gae length mismatch: {rewards.shape}, {values.shape}, {dones.shape}")
    advantages = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    steps = rewards.shape[0]
    for t in reversed(range(steps)):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t + 1 < steps else np.zeros(rewards.shape[1:])
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
    return advantages, advantages + values


def clipped_surrogate(ratio, advantage, clip_eps):
    """Per-step PPO objective min(r A, clip(r, 1-eps, 1+eps) A)"""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


# ----------------------------------------------------------- rollouts

def collect(policy, model, disc, tasks, cfg, seed):
    """H stochastic episodes per task; head n serves tasks[n]"""
    tasks = list(tasks)
    if policy.num_tasks != len(tasks):
        raise ConfigurationError(f"Policy has {policy.num_tasks} tasks, got {len(tasks)}")
    H = cfg.episodes_per_task
    segments = []
    for n, task in enumerate(tasks):
        if model is not None and model.d != task.d:
            raise ConfigurationError(f"Decoder d={model.d} does not match task {task.name} d={task.d}")
        rng = make_rng(seed, "collect", n)
        state = envs.reset(task, seed=derive_seed(seed, "reset", n), num_envs=H)
        columns = {k: [] for k in ("obs", "z", "a", "r_env", "h_z", "disc_lp", "h_a", "r_hat", "logp", "value")}
        for _ in range(task.horizon):
            obs = envs.observe(task, state)
            a, z, logp, h_z, h_a = act(policy, model, obs, n, "stochastic", rng,
                                       decoder_mode=cfg.decoder_sampling)
            h_a = np.full(H, h_a)
            disc_lp = disc.logprob(a, z) if disc is not None else np.zeros(H)
            result = envs.step(task, state, np.clip(a, -1.0, 1.0))
            r_env = np.asarray(result.reward, dtype=np.float64)
            r_hat = extended_reward(r_env, h_z, disc_lp, h_a, cfg)
            for key, val in (("obs", obs), ("z", z), ("a", a), ("r_env", r_env), ("h_z", h_z),
                             ("disc_lp", disc_lp), ("h_a", h_a), ("r_hat", r_hat), ("logp", logp),
                             ("value", policy.value(n, obs))):
                columns[key].append(val)
            state = result.next_state
        done = np.zeros((task.horizon, H), dtype=bool)
        done[-1] = True
        arrays = {k: np.stack(v) for k, v in columns.items()}
        if not np.all(np.isfinite(arrays["logp"])):
            raise DivergenceError(f"Non-finite log-probabilities while collecting {task.name}")
        segments.append(TaskRollout(task_index=n, task_name=task.name, done=done, **arrays))
    return RolloutBatch(segments, seed)


def evaluate(policy, model, tasks, episodes=1, seed=0):
    """Mean environment return per task with both stages deterministic"""
    returns = []
    for n, task in enumerate(tasks):
        state = envs.reset(task, seed=derive_seed(seed, "eval", n), num_envs=episodes)
        total = np.zeros(episodes)
        for _ in range(task.horizon):
            obs = envs.observe(task, state)
            a = act(policy, model, obs, n, "deterministic")[0]
            result = envs.step(task, state, np.clip(a, -1.0, 1.0))
            total += result.reward
            state = result.next_state
        returns.append(float(total.mean()))
    return returns


# --------------------------------------------------------------- updates

def ppo_update(policy, model, batch, cfg, optimizers=None, rng=None):
    """Clipped-surrogate PPO on the latent heads plus the decoder likelihood step"""
    optimizers = optimizers or PpoOptimizers.create(cfg)
    rng = rng if rng is not None else make_rng(cfg.seed, "ppo", batch.seed)
    segments = batch.segments
    decoder_names = set(model.trainable_names()) if model is not None else set()
    policy_names = set(policy.params.names())

    flat = []
    for seg in segments:
        adv, targets = gae(seg.r_hat, seg.value, seg.done, cfg.gamma, cfg.gae_lambda)
        flat.append({"obs": seg.flat("obs"), "z": seg.flat("z"), "a": seg.flat("a"),
                     "logp": seg.flat("logp"), "adv": adv.reshape(-1), "targets": targets.reshape(-1)})
    all_adv = np.concatenate([f["adv"] for f in flat])
    adv_mean, adv_std = all_adv.mean(), all_adv.std()
    for f in flat:
        f["adv"] = (f["adv"] - adv_mean) / (adv_std + 1e-8)
    sizes = [len(f["adv"]) for f in flat]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    report = PpoReport(head_counts={seg.task_name: int(s) for seg, s in zip(segments, sizes)})
    stats = {"surrogate": [], "value": [], "decoder": [], "clipped": [], "kl": []}

    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(total)
        for start in range(0, total, cfg.minibatch):
            index = order[start:start + cfg.minibatch]
            owner = np.searchsorted(offsets, index, side="right") - 1
            count = len(index)
            terms = []
            for s in np.unique(owner):
                rows = np.sort(index[owner == s] - offsets[s])
                f = flat[s]
                n = segments[s].task_index
                mu, log_std = policy.distribution_nodes(n, f["obs"][rows])
                logp = dn.gaussian_logprob_node(mu, log_std, dn.const(f["z"][rows]))
                ratio = dn.exp(dn.sub(logp, dn.const(f["logp"][rows])))
                if np.max(ratio.value) > cfg.max_ratio:
                    raise StaleBatchError(
                        f"Importance ratio {np.max(ratio.value):.3e} > {cfg.max_ratio:g} on task "
                        f"{segments[s].task_name}; the batch does not match the current policy")
                adv = dn.const(f["adv"][rows])
                surrogate = dn.minimum(dn.mul(ratio, adv),
                                       dn.mul(dn.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv))
                value = policy.value_node(n, f["obs"][rows])
                value_err = dn.reduce_sum(dn.square(dn.sub(value, dn.const(f["targets"][rows]))))
                term = dn.add(dn.neg(dn.reduce_sum(surrogate)), dn.scale(value_err, cfg.value_coef))
                stats["surrogate"].append(float(np.sum(surrogate.value)))
                stats["value"].append(float(value_err.value))
                stats["clipped"].append(float(np.sum(np.abs(ratio.value - 1.0) > cfg.clip_eps)))
                stats["kl"].append(float(np.sum(f["logp"][rows] - logp.value)))
                if decoder_names:
                    a_mean = model.mean_node(dn.const(f["z"][rows]))
                    dec_lp = dn.gaussian_logprob_node(a_mean, model.log_std_node(), dn.const(f["a"][rows]))
                    term = dn.sub(term, dn.reduce_sum(dn.mul(adv, dec_lp)))
                    stats["decoder"].append(float(np.sum(dec_lp.value)))
                terms.append(term)
            loss = terms[0]
            for term in terms[1:]:
                loss = dn.add(loss, term)
            loss = dn.scale(loss, 1.0 / count)
            if decoder_names and cfg.alpha3 > 0:
                loss = dn.sub(loss, dn.scale(dn.gaussian_entropy_node(model.log_std_node()), cfg.alpha3))
            if not math.isfinite(float(loss.value)):
                raise DivergenceError("Non-finite PPO loss")
            grads = dn.backward(loss)
            try:
                optimizers.policy.step(policy.params, {k: g for k, g in grads.items() if k in policy_names},
                                       max_grad_norm=cfg.max_grad_norm)
                if decoder_names:
                    optimizers.decoder.step(model.params,
                                            {k: g for k, g in grads.items() if k in decoder_names},
                                            max_grad_norm=cfg.max_grad_norm)
                    model.clamp()
            except DomainError as e:
                raise DivergenceError(str(e))

    if total and stats["value"]:
        steps_seen = total * max(cfg.ppo_epochs, 1)
        report.policy_surrogate = float(np.sum(stats["surrogate"]) / steps_seen)
        report.value_loss = float(np.sum(stats["value"]) / steps_seen)
        report.clip_fraction = float(np.sum(stats["clipped"]) / steps_seen)
        report.approx_kl = float(np.sum(stats["kl"]) / steps_seen)
        if stats["decoder"]:
            report.decoder_logprob = float(np.sum(stats["decoder"]) / steps_seen)
    return report


# ------------------------------------------------------------ diagnostics

def _gaussian_logpdf_full(x, mean, cov):
    chol = np.linalg.cholesky(cov)
    diff = (x - mean).T
    solved = np.linalg.solve(chol, diff)
    k = cov.shape[0]
    return -0.5 * (k * dn.LOG_2PI + 2.0 * np.sum(np.log(np.diag(chol))) + np.sum(solved * solved, axis=0))


def _linear_terms(model):
    phi = model.params["decoder.phi"]
    offset = model.params["decoder.offset"] if "decoder.offset" in model.params else np.zeros(model.d)
    return phi, offset


def entropy_bound_gap(policy, model, disc, states, n, samples, rng=None):
    """Monte Carlo check of H[pi(a|s,n)] >= H(pi_z) + E H(p_a) - E[-log q(z|a)].

    ``disc=None`` uses the exact Gaussian posterior of z given a, which makes
    the bound tight (linear decoders only). For an MLP decoder the left side
    has no closed-form density and only the right side is returned.
    """
    if samples < 1000:
        raise ConfigurationError("entropy_bound_gap needs at least 1000 samples")
    rng = rng if rng is not None else make_rng(0, "bound_gap")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    linear = model.form == "linear"
    if disc is None and not linear:
        raise ConfigurationError("The exact posterior is only available for linear decoders")
    mu_all, log_std_all = policy.distribution(n, states)
    log_std_a = model.log_std()
    var_a = np.exp(2.0 * log_std_a)
    h_a = dn.diag_gaussian_entropy(log_std_a)
    lhs_samples, rhs_samples = [], []
    for mu, log_std in zip(mu_all, log_std_all):
        std_z = np.exp(log_std)
        z = mu + std_z * rng.standard_normal((samples, model.b))
        a = model.mean(z) + np.exp(log_std_a) * rng.standard_normal((samples, model.d))
        h_z = dn.diag_gaussian_entropy(log_std)
        if linear:
            phi, offset = _linear_terms(model)
            marginal_cov = phi.T @ np.diag(std_z ** 2) @ phi + np.diag(var_a)
            lhs_samples.append(-_gaussian_logpdf_full(a, mu @ phi + offset, marginal_cov))
        if disc is None:
            precision = np.diag(1.0 / std_z ** 2) + phi @ np.diag(1.0 / var_a) @ phi.T
            post_cov = np.linalg.inv(precision)
            post_cov = 0.5 * (post_cov + post_cov.T)
            post_mean = (mu / std_z ** 2 + ((a - offset) / var_a) @ phi.T) @ post_cov
            q_lp = np.array([_gaussian_logpdf_full(z[i:i + 1], post_mean[i], post_cov)[0]
                             for i in range(samples)])
        else:
            q_lp = disc.logprob(a, z)
        rhs_samples.append(h_z + h_a + q_lp)
    rhs_all = np.concatenate(rhs_samples)
    rhs = float(rhs_all.mean())
    if not linear:
        return BoundGap(None, rhs, None, float(rhs_all.std() / math.sqrt(rhs_all.size)), False)
    diff = np.concatenate(lhs_samples) - rhs_all
    return BoundGap(float(np.concatenate(lhs_samples).mean()), rhs, float(diff.mean()),
                    float(diff.std() / math.sqrt(diff.size)), True)


# ------------------------------------------------------------------ train

def _state_dump(path, policy, model, disc, reason):
    doc = {"reason": reason,
           "policy": policy.params.to_dict(policy.meta()),
           "synergy": model.params.to_dict(model.meta()) if model is not None else None,
           "disc": disc.params.to_dict(disc.meta()) if disc is not None else None}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    logger.error(f"State dump written to: {path}")
    return path


def _returns_flat(history, window, tol):
    if len(history) < window:
        return False
    x = np.arange(window, dtype=np.float64)
    slopes = [np.polyfit(x, np.array(h[-window:]), 1)[0] for h in zip(*history)]
    return all(abs(s) < tol for s in slopes)


def _first_positive_step(batch, offset):
    """Global environment-step index of the first positive reward in the batch"""
    best = None
    position = offset
    for seg in batch.segments:
        horizon, episodes = seg.r_env.shape
        hits = np.argwhere(seg.r_env.T > 0)
        if hits.size:
            h, t = hits[0]
            candidate = position + int(h) * horizon + int(t)
            best = candidate if best is None else min(best, candidate)
        position += seg.num_steps
    return best


def train(tasks, cfg, model=None, out_dir=None):
    """Run the DiscoSyn loop: collect, fit q, PPO update, evaluate"""
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("train needs at least one task")
    d = tasks[0].d
    if any(t.d != d for t in tasks):
        raise ConfigurationError("All tasks must share the action dimension")
    if model is None:
        model = SynergyModel.create(cfg.decoder_form, cfg.b, d, make_rng(cfg.seed, "init", "decoder"),
                                    hidden=cfg.decoder_hidden, activation=cfg.activation)
    elif model.d != d:
        raise ConfigurationError(f"Decoder d={model.d} does not match tasks d={d}")
    policy = TaskPolicy([t.obs_dim for t in tasks], model.b, cfg.policy_hidden, cfg.activation,
                        cfg.single_head, rng=make_rng(cfg.seed, "init", "policy"))
    disc = Discriminator(d, model.b, cfg.disc_hidden, cfg.activation, rng=make_rng(cfg.seed, "init", "disc"))
    optimizers = PpoOptimizers.create(cfg)
    train_disc = cfg.alpha2 > 0 or not model.frozen
    result = TrainResult(policy, model, disc, tasks)
    names = [t.name for t in tasks]
    logger.info(f"Training on {names}: b={model.b}, form={model.form}, frozen={model.frozen}, "
                f"iterations={cfg.iterations}")

    for it in range(cfg.iterations):
        batch = collect(policy, model, disc, tasks, cfg, seed=derive_seed(cfg.seed, "collect", it))
        first = _first_positive_step(batch, result.env_steps)
        if result.first_reward_step is None and first is not None:
            result.first_reward_step = first
        result.env_steps += batch.num_steps
        try:
            if train_disc:
                disc_update(disc, batch.all_flat("z"), batch.all_flat("a"), cfg.lr_disc, cfg.disc_epochs)
            report = ppo_update(policy, model, batch, cfg, optimizers, rng=make_rng(cfg.seed, "ppo", it))
        except (DivergenceError, DomainError) as e:
            dump = _state_dump(os.path.join(out_dir, "state_dump.json"), policy, model, disc, str(e)) \
                if out_dir else None
            raise DivergenceError(f"Iteration {it}: {e}", dump_path=dump)

        is_eval = cfg.eval_every > 0 and ((it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1)
        eval_returns = evaluate(policy, model, tasks, cfg.eval_episodes, derive_seed(cfg.seed, "eval")) \
            if is_eval else [None] * len(tasks)
        batch_returns = [float(seg.episode_returns.mean()) for seg in batch.segments]
        result.training_returns.append(batch_returns)
        for n, seg in enumerate(batch.segments):
            gap = None
            if is_eval and model.form == "linear":
                picks = np.linspace(0, seg.flat("obs").shape[0] - 1, cfg.bound_states).astype(int)
                gap = entropy_bound_gap(policy, model, disc, seg.flat("obs")[picks], n, cfg.bound_samples,
                                        rng=make_rng(cfg.seed, "bound", it, n)).gap
            result.curves.append({
                "iteration": it, "task": seg.task_name, "eval_return": eval_returns[n],
                "r_env_mean": batch_returns[n], "Hz_mean": float(seg.h_z.mean()),
                "disc_lp_mean": float(seg.disc_lp.mean()), "Ha_mean": float(seg.h_a.mean()),
                "bound_gap": gap})
        result.iterations_run = it + 1
        summary = ", ".join(f"{name}={ret:.2f}" for name, ret in zip(names, batch_returns))
        logger.info(f"[{it + 1}/{cfg.iterations}] returns: {summary} | surrogate {report.policy_surrogate:.4f} "
                    f"value {report.value_loss:.4f}")
        if cfg.early_stop and _returns_flat(result.training_returns, cfg.early_stop_window, cfg.early_stop_slope):
            logger.info(f"Returns flat over {cfg.early_stop_window} iterations, stopping at {it + 1}")
            break

    result.final_returns = evaluate(policy, model, tasks, cfg.eval_episodes, derive_seed(cfg.seed, "eval"))
    if result.iterations_run:
        for seg in batch.segments:
            for z in seg.flat("z"):
                result.z_samples.append((seg.task_name, z))
    return result


def success_flags(returns, references, fraction):
    """Per-task pass/fail against reference returns (None when no reference)"""
    flags = []
    for ret, ref in zip(returns, references):
        if ref is None:
            flags.append(None)
        elif ref > 0:
            flags.append(bool(ret >= fraction * ref))
        else:
            flags.append(bool(ret >= ref - (1.0 - fraction) * abs(ref)))
    return flags
