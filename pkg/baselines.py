"""Sequential synergy extraction: independent agents, action datasets, PCA/AE fits and low-dim retraining."""
import logging
from dataclasses import dataclass, field

import numpy as np

import diffnet as dn
import discorl
import envs
from config import AE_DEFAULTS
from diffnet import MlpSpec, ParamSet
from errors import ConfigurationError, DivergenceError
from seeding import derive_seed, make_rng
from synergy import SynergyModel, act

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ZERO_VARIANCE = 1e-24


@dataclass
class ActionDataset:
    """Executed actions with per-row (task id, episode, step) provenance"""
    rows: np.ndarray
    task_ids: np.ndarray
    episodes: np.ndarray
    steps: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.task_ids = np.asarray(self.task_ids, dtype=int)
        self.episodes = np.asarray(self.episodes, dtype=int)
        self.steps = np.asarray(self.steps, dtype=int)
        if not (len(self.rows) == len(self.task_ids) == len(self.episodes) == len(self.steps)):
            raise ConfigurationError("Dataset provenance is not aligned with its rows")
        if not np.all(np.isfinite(self.rows)):
            raise ConfigurationError("Dataset rows must be finite")

    @property
    def mean(self):
        return self.rows.mean(axis=0)

    @property
    def d(self):
        return self.rows.shape[1]

    def __len__(self):
        return len(self.rows)

    def groups(self):
        """Episode key per row, unique across tasks"""
        return self.task_ids * (int(self.episodes.max(initial=0)) + 1) + self.episodes

    def for_task(self, task_id):
        keep = self.task_ids == task_id
        return ActionDataset(self.rows[keep], self.task_ids[keep], self.episodes[keep], self.steps[keep])

    @classmethod
    def from_rows(cls, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        count = len(rows)
        return cls(rows, np.zeros(count, dtype=int), np.arange(count), np.zeros(count, dtype=int))


def _rows_of(data):
    if isinstance(data, ActionDataset):
        return data
    return ActionDataset.from_rows(data)


@dataclass
class IndependentAgent:
    """Full-dimensional single-task agent; head 0 of ``policy`` drives ``task``"""
    task: envs.Task
    policy: object
    model: SynergyModel
    reference_return: float
    result: discorl.TrainResult = None


@dataclass
class PcaModel:
    components: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray
    explained_ratio: float

    @property
    def b(self):
        return self.components.shape[0]

    @property
    def d(self):
        return self.components.shape[1]

    def encode(self, a):
        return (np.asarray(a, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, a):
        return self.encode(a) @ self.components + self.mean

    def to_decoder(self):
        """Frozen linear decoder a = z components + mean"""
        return SynergyModel.from_linear(self.components, offset=self.mean, frozen=True)

    def save(self, path):
        params = ParamSet({"pca.components": self.components, "pca.mean": self.mean,
                           "pca.eigenvalues": self.eigenvalues})
        ratio = None if np.isnan(self.explained_ratio) else self.explained_ratio
        return dn.save_checkpoint(path, params, {"kind": "pca", "b": self.b, "d": self.d,
                                                  "explained_ratio": ratio})

    @classmethod
    def load(cls, path):
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "pca":
            raise ConfigurationError(f"{path} is not a PCA checkpoint")
        ratio = meta.get("explained_ratio")
        return cls(params["pca.components"], params["pca.mean"], params["pca.eigenvalues"],
                   float("nan") if ratio is None else float(ratio))


@dataclass
class AeModel:
    encoder: MlpSpec
    decoder: MlpSpec
    params: ParamSet
    recon_mse: float = float("nan")
    heldout_mse: float = float("nan")
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.encoder.in_dim != self.decoder.out_dim or self.encoder.out_dim != self.decoder.in_dim:
            raise ConfigurationError(f"Encoder {self.encoder.layer_widths} and decoder "
                                     f"{self.decoder.layer_widths} widths are inconsistent")

    @property
    def b(self):
        return self.encoder.out_dim

    @property
    def d(self):
        return self.encoder.in_dim

    def encode(self, a):
        return dn.mlp_forward(self.params, self.encoder, a, prefix="ae_enc")

    def decode(self, z):
        return dn.mlp_forward(self.params, self.decoder, z, prefix="ae_dec")

    def reconstruct(self, a):
        return self.decode(self.encode(a))

    def mse(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if len(rows) == 0:
            return float("nan")
        return float(np.mean((self.reconstruct(rows) - rows) ** 2))

    def to_decoder(self):
        return SynergyModel.from_mlp(self.decoder, self.params, "ae_dec", frozen=True)

    def save(self, path):
        meta = {"kind": "ae", "encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "recon_mse": _finite_or_none(self.recon_mse), "heldout_mse": _finite_or_none(self.heldout_mse)}
        return dn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path):
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "ae":
            raise ConfigurationError(f"{path} is not an autoencoder checkpoint")
        nan = float("nan")
        return cls(MlpSpec.from_dict(meta["encoder"]), MlpSpec.from_dict(meta["decoder"]), params,
                   nan if meta.get("recon_mse") is None else meta["recon_mse"],
                   nan if meta.get("heldout_mse") is None else meta["heldout_mse"])


@dataclass
class LowDimResult:
    task: envs.Task
    policy: object
    model: SynergyModel
    curves: list
    final_return: float
    reference_return: object
    success: object
    result: discorl.TrainResult = None


def _finite_or_none(x):
    return float(x) if x is not None and np.isfinite(x) else None


def as_decoder(decoder):
    """Frozen SynergyModel view of a PCA model, an autoencoder or a synergy model"""
    if isinstance(decoder, (PcaModel, AeModel)):
        return decoder.to_decoder()
    if isinstance(decoder, SynergyModel):
        return decoder
    raise ConfigurationError(f"Unsupported decoder type: {type(decoder).__name__}")


def method_label(method, b, form="linear"):
    """Success-table row name, e.g. PCA4, AE6, DiscoSyn3-L"""
    if method == "pca":
        return f"PCA{b}"
    if method == "ae":
        return f"AE{b}"
    if method == "discosyn":
        return f"DiscoSyn{b}-{'L' if form == 'linear' else 'NL'}"
    if method == "independent":
        return "PPO-full"
    raise ConfigurationError(f"Unknown method: {method}")


# ------------------------------------------------------- independent agents

def train_independent(task, cfg, out_dir=None):
    """Vanilla full-dimensional PPO on one task: no bonuses, b = d, frozen identity decoder"""
    vanilla = cfg.replace(alpha1=0.0, alpha2=0.0, alpha3=0.0, decoder_sampling="deterministic")
    result = discorl.train([task], vanilla, model=SynergyModel.identity(task.d), out_dir=out_dir)
    reference = result.final_returns[0]
    logger.info(f"Independent agent for {task.name}: reference return {reference:.4f}")
    return IndependentAgent(task, result.policy, result.model, reference, result)


def collect_dataset(agents, tasks, episodes_per_task, seed=0, deterministic=True):
    """Roll out one agent per task and stack the executed (clipped) actions"""
    agents, tasks = list(agents), list(tasks)
    if len(agents) != len(tasks):
        raise ConfigurationError(f"collect_dataset needs one agent per task ({len(agents)} vs {len(tasks)})")
    if episodes_per_task < 1:
        raise ConfigurationError("episodes_per_task must be >= 1")
    mode = "deterministic" if deterministic else "stochastic"
    rows, task_ids, episodes, steps = [], [], [], []
    for n, (agent, task) in enumerate(zip(agents, tasks)):
        if agent.model.d != task.d:
            raise ConfigurationError(f"Agent for {agent.task.name} has d={agent.model.d}, task {task.name} d={task.d}")
        rng = make_rng(seed, "dataset", n)
        state = envs.reset(task, seed=derive_seed(seed, "dataset_reset", n), num_envs=episodes_per_task)
        actions = []
        for _ in range(task.horizon):
            obs = envs.observe(task, state)
            a = np.clip(act(agent.policy, agent.model, obs, 0, mode, rng)[0], -1.0, 1.0)
            actions.append(a)
            state = envs.step(task, state, a).next_state
        block = np.stack(actions, axis=1)
        rows.append(block.reshape(-1, task.d))
        task_ids.append(np.full(block.shape[0] * block.shape[1], n))
        episodes.append(np.repeat(np.arange(episodes_per_task), task.horizon))
        steps.append(np.tile(np.arange(task.horizon), episodes_per_task))
    data = ActionDataset(np.concatenate(rows), np.concatenate(task_ids),
                         np.concatenate(episodes), np.concatenate(steps))
    logger.info(f"Collected {len(data)} action rows from {len(tasks)} tasks ({mode})")
    return data


# -------------------------------------------------------------------- PCA

def pca_fit(data, b):
    data = _rows_of(data)
    rows = data.rows
    count, d = rows.shape
    if count <= d:
        raise ConfigurationError(f"PCA needs more rows than dimensions ({count} <= {d})")
    if not 1 <= b <= d:
        raise ConfigurationError(f"PCA dimension b={b} must be in [1, {d}]")
    mean = rows.mean(axis=0)
    _, s, vt = np.linalg.svd(rows - mean, full_matrices=False)
    # largest-magnitude entry of each component is positive
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    eigenvalues = s ** 2 / (count - 1)
    total = eigenvalues.sum()
    rank = int(np.sum(s > 1e-10 * max(s.max(), 1e-300)))
    if rank < b:
        logger.warning(f"PCA data has rank {rank} < b={b}; trailing components span zero variance")
    if total <= ZERO_VARIANCE:
        logger.warning("PCA data has zero variance; explained ratio is undefined")
        ratio = float("nan")
    else:
        ratio = float(eigenvalues[:b].sum() / total)
    logger.info(f"PCA b={b}: explained ratio {ratio:.4f}")
    return PcaModel(vt[:b].copy(), mean, eigenvalues, ratio)


# ------------------------------------------------------------ autoencoder

def ae_fit(data, b, ae_cfg=None, seed=0):
    """Fit an MLP autoencoder d -> b -> d on mean squared reconstruction error"""
    cfg = {**AE_DEFAULTS, **(ae_cfg or {})}
    data = _rows_of(data)
    rows = data.rows
    d = data.d
    if len(rows) <= 10 * b:
        raise ConfigurationError(f"Autoencoder needs more than {10 * b} rows, got {len(rows)}")

    groups = data.groups()
    unique = np.unique(groups)
    rng = make_rng(seed, "ae", "split")
    held = int(round(cfg['holdout_fraction'] * len(unique))) if len(unique) > 1 else 0
    held_groups = set(rng.permutation(unique)[:held].tolist())
    is_held = np.array([g in held_groups for g in groups], dtype=bool)
    train_rows, held_rows = rows[~is_held], rows[is_held]

    hidden = tuple(cfg['hidden'])
    encoder = MlpSpec((d,) + hidden + (b,), cfg['activation'])
    decoder = MlpSpec((b,) + hidden + (d,), cfg['activation'])
    params = ParamSet()
    init_rng = make_rng(seed, "ae", "init")
    dn.init_mlp(params, encoder, "ae_enc", init_rng)
    dn.init_mlp(params, decoder, "ae_dec", init_rng)
    model = AeModel(encoder, decoder, params)

    def loss_fn(batch):
        def fn(p):
            code = dn.mlp_node(p, encoder, dn.const(batch), prefix="ae_enc")
            recon = dn.mlp_node(p, decoder, code, prefix="ae_dec")
            return dn.reduce_mean(dn.square(dn.sub(recon, dn.const(batch))))
        return fn

    optimizer = dn.Adam(cfg['lr'])
    order_rng = make_rng(seed, "ae", "minibatch")
    initial = model.mse(train_rows)
    logger.info(f"Autoencoder {d}->{b}->{d}: {len(train_rows)} train rows, {len(held_rows)} held out, "
                f"initial MSE {initial:.6f}")
    log_every = max(1, cfg['epochs'] // 10)
    for epoch in range(cfg['epochs']):
        order = order_rng.permutation(len(train_rows))
        for start in range(0, len(order), cfg['minibatch']):
            batch = train_rows[order[start:start + cfg['minibatch']]]
            _, grads = dn.value_and_grad(loss_fn(batch), params)
            optimizer.step(params, grads)
        mse = model.mse(train_rows)
        model.history.append(mse)
        if not np.isfinite(mse) or mse > 10.0 * max(initial, 1e-12):
            logger.error(f"Autoencoder diverged at epoch {epoch + 1}: MSE {mse} vs initial {initial}")
            raise DivergenceError(f"Autoencoder diverged at epoch {epoch + 1} (MSE {mse:.3e})")
        if (epoch + 1) % log_every == 0:
            logger.info(f"[{epoch + 1}/{cfg['epochs']}] AE train MSE {mse:.6f}")

    model.recon_mse = model.mse(train_rows)
    model.heldout_mse = model.mse(held_rows)
    logger.info(f"Autoencoder done: train MSE {model.recon_mse:.6f}, held-out MSE {model.heldout_mse:.6f}")
    return model


# ---------------------------------------------------------- low-dim agents

def retrain_lowdim(frozen_decoder, task, cfg, reference_return=None, out_dir=None):
    """PPO on latent actions through a frozen extracted decoder, without any entropy bonus.

    The training setup matches train_independent, so an identity decoder reproduces
    the full-dimensional agent exactly.
    """
    model = as_decoder(frozen_decoder)
    if not model.frozen:
        raise ConfigurationError("retrain_lowdim needs a frozen decoder")
    if model.d != task.d:
        raise ConfigurationError(f"Decoder d={model.d} does not match task {task.name} d={task.d}")
    lowdim = cfg.replace(alpha1=0.0, alpha2=0.0, alpha3=0.0, decoder_sampling="deterministic")
    result = discorl.train([task], lowdim, model=model, out_dir=out_dir)
    final = result.final_returns[0]
    success = discorl.success_flags([final], [reference_return], cfg.success_fraction)[0]
    logger.info(f"Low-dim agent on {task.name}: return {final:.4f}, reference {reference_return}, "
                f"success {success}")
    return LowDimResult(task, result.policy, model, result.curves, final, reference_return, success, result)


# ------------------------------------------------------- explained variance

def explained_variance(decoder, data):
    """1 - |A - A_hat|^2 / |A - mean(A)|^2 for a decoder's reconstruction.

    PCA models and autoencoders reconstruct dataset rows; a SynergyModel takes
    (z, a) pairs and reconstructs a by least squares on z (linear) or by its
    mean map (MLP). Zero-variance targets give NaN.
    """
    if isinstance(decoder, (PcaModel, AeModel)):
        target = _rows_of(data).rows
        recon = decoder.reconstruct(target)
    elif isinstance(decoder, SynergyModel):
        z, target = (np.asarray(x, dtype=np.float64) for x in data)
        if len(z) != len(target):
            raise ConfigurationError(f"explained_variance needs paired data ({len(z)} vs {len(target)})")
        if decoder.form == "linear":
            design = np.hstack([z, np.ones((len(z), 1))])
            coef, *_ = np.linalg.lstsq(design, target, rcond=None)
            recon = design @ coef
        else:
            recon = decoder.mean(z)
    else:
        raise ConfigurationError(f"Unsupported decoder type: {type(decoder).__name__}")
    total = float(np.sum((target - target.mean(axis=0)) ** 2))
    if total <= ZERO_VARIANCE:
        logger.warning("Explained variance is undefined for zero-variance data")
        return float("nan")
    return 1.0 - float(np.sum((target - recon) ** 2)) / total


def eval_pairs(policy, model, tasks, episodes=1, seed=0):
    """Deterministic (z, a) pairs from evaluation rollouts of the composed agent"""
    zs, actions = [], []
    for n, task in enumerate(tasks):
        state = envs.reset(task, seed=derive_seed(seed, "eval", n), num_envs=episodes)
        for _ in range(task.horizon):
            obs = envs.observe(task, state)
            a, z = act(policy, model, obs, n, "deterministic")[:2]
            zs.append(z)
            actions.append(a)
            state = envs.step(task, state, np.clip(a, -1.0, 1.0)).next_state
    return np.concatenate(zs), np.concatenate(actions)


# -------------------------------------------------------- full pipeline

@dataclass
class SequentialResult:
    method: str
    b: int
    agents: list
    dataset: ActionDataset
    fitted: object
    lowdim: list
    explained: float

    @property
    def label(self):
        return method_label(self.method, self.b)


def run_sequential(tasks, cfg, method="pca", b=4, episodes_per_task=50, deterministic=True,
                   ae_cfg=None, seed=0, out_dir=None):
    """Independent agents -> action dataset -> PCA/AE fit -> low-dim retraining per task"""
    tasks = list(tasks)
    agents = []
    for i, task in enumerate(tasks, 1):
        logger.info(f"[{i}/{len(tasks)}] Independent PPO on {task.name}")
        agents.append(train_independent(task, cfg, out_dir=out_dir))
    data = collect_dataset(agents, tasks, episodes_per_task, seed=seed, deterministic=deterministic)
    if method == "pca":
        fitted = pca_fit(data, b)
    elif method == "ae":
        fitted = ae_fit(data, b, ae_cfg, seed=seed)
    else:
        raise ConfigurationError(f"Unknown baseline method: {method}")
    lowdim = []
    for i, (task, agent) in enumerate(zip(tasks, agents), 1):
        logger.info(f"[{i}/{len(tasks)}] Low-dim retraining on {task.name} ({method_label(method, b)})")
        lowdim.append(retrain_lowdim(fitted, task, cfg, agent.reference_return, out_dir=out_dir))
    explained = explained_variance(fitted, data)
    return SequentialResult(method, b, agents, data, fitted, lowdim, explained)
