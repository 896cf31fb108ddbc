import logging
import os

import analyze_results as ar
import baselines
import discorl
import envs
import transfer
from discorl import TrainConfig
from errors import ConfigurationError
from seeding import derive_seed
from synergy import SynergyModel, TaskPolicy

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

UNHASHED = ('run.log', 'manifest.json')
TRANSFER_TASKS = {
    'cw-valve': 'cw_valve',
    'cyl-valve': 'cyl_valve',
    'topdown-screw': 'topdown_screw',
    'orth-valve': 'orth_valve',
}


def write_manifest(out_dir):
    """Hash every output file under out_dir except the log and the manifest itself"""
    files = {}
    for root, _, names in os.walk(out_dir):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir).replace(os.sep, '/')
            if rel in UNHASHED:
                continue
            with open(path, 'rb') as f:
                files[rel] = ar.git_blob_sha1(f.read())
    ar.write_json(os.path.join(out_dir, 'manifest.json'), {'files': dict(sorted(files.items()))})
    return files


class ExperimentRunner:
    def __init__(self, resolved, out_dir):
        self.config = resolved
        self.out_dir = out_dir
        self.seed = resolved['seed']
        self.commands = {
            'train-discosyn': self.train_discosyn,
            'train-baseline': self.train_baseline,
            'transfer': self.transfer,
            'sparse-bench': self.sparse_bench,
            'analyze': self.analyze,
            'report': self.report,
            'eval': self.evaluate,
        }
        self.train_config()

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def train_config(self, **changes):
        cfg = TrainConfig.from_dict(self.config['train'], seed=self.seed)
        return cfg.replace(**changes) if changes else cfg

    def task_set(self):
        ts = self.config['task_set']
        return envs.make_task_set(ts['id'], d=ts['d'], seed=ts['seed'], engagement_on=ts['engagement_on'],
                                  orthogonal=ts['orthogonal'], horizon=ts['horizon'])

    def run(self):
        """Execute the configured command; returns the run directory"""
        command = self.config['command']
        os.makedirs(self.out_dir, exist_ok=True)
        handler = logging.FileHandler(self.path('run.log'), mode='w', encoding='utf-8')
        handler.setFormatter(logging.Formatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
        logging.getLogger().addHandler(handler)
        try:
            ar.write_json(self.path('config.resolved.json'), self.config)
            logger.info(f"Running {command} (seed {self.seed}) into {self.out_dir}")
            self.commands[command]()
            files = write_manifest(self.out_dir)
            if command == 'train-baseline':
                # the success table only accepts a results.json already covered by the manifest
                ar.report([self.out_dir], self.out_dir)
                files = write_manifest(self.out_dir)
            logger.info(f"\n{'=' * 60}")
            logger.info(f"{command.upper()} COMPLETED!")
            logger.info(f"{'=' * 60}")
            logger.info(f"Output directory: {self.out_dir}")
            logger.info(f"Files hashed: {len(files)}")
            logger.info(f"{'=' * 60}")
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
        return self.out_dir

    # -------------------------------------------------------- exports

    def write_curves(self, curves):
        header = ['iteration', 'task', 'eval_return', 'r_env_mean', 'Hz_mean', 'disc_lp_mean', 'Ha_mean',
                  'bound_gap']
        ar.write_csv(self.path('curves.csv'), header, [[row[k] for k in header] for row in curves])

    def write_z_samples(self, z_samples, b):
        header = ['task'] + [f'z{i}' for i in range(b)]
        ar.write_csv(self.path('z_samples.csv'), header, [[name] + list(z) for name, z in z_samples])

    def write_results(self, method, task_set, names, returns, references, explained, extra=None):
        cfg_fraction = self.config['train']['success_fraction']
        flags = discorl.success_flags(returns, references, cfg_fraction)
        doc = {
            'command': self.config['command'],
            'method': method,
            'task_set': task_set.identity(),
            'tasks': [{'name': n, 'eval_return': r, 'reference_return': ref, 'success': s}
                      for n, r, ref, s in zip(names, returns, references, flags)],
            'explained_variance': explained,
        }
        doc.update(extra or {})
        ar.write_json(self.path('results.json'), doc)
        return doc

    def references_for(self, names):
        refs = self.config['train']['reference_returns']
        return [refs.get(n) for n in names]

    # -------------------------------------------------------- commands

    def train_discosyn(self):
        task_set = self.task_set()
        cfg = self.train_config()
        envs.save_task_set(self.path('task_set.json'), task_set)
        result = discorl.train(task_set.tasks, cfg, out_dir=self.out_dir)
        result.policy.save(self.path('policy.json'))
        result.model.save(self.path('synergy.json'))
        result.disc.save(self.path('disc.json'))
        self.write_curves(result.curves)
        self.write_z_samples(result.z_samples, result.model.b)
        z, a = baselines.eval_pairs(result.policy, result.model, task_set.tasks, cfg.eval_episodes,
                                    derive_seed(cfg.seed, 'eval'))
        explained = baselines.explained_variance(result.model, (z, a))
        label = baselines.method_label('discosyn', result.model.b, result.model.form)
        self.write_results(label, task_set, task_set.names, result.final_returns,
                           self.references_for(task_set.names), explained,
                           {'iterations_run': result.iterations_run, 'env_steps': result.env_steps})
        logger.info(f"{label} final returns: {result.final_returns}")

    def train_baseline(self):
        task_set = self.task_set()
        cfg = self.train_config()
        base = self.config['baseline']
        envs.save_task_set(self.path('task_set.json'), task_set)
        seq = baselines.run_sequential(task_set.tasks, cfg, base['method'], base['b'], base['episodes_per_task'],
                                       base['deterministic_dataset'], self.config['ae'], self.seed, self.out_dir)
        data = seq.dataset
        ar.write_csv(self.path('dataset.csv'), ['task_id', 'episode', 'step'] + [f'a{i}' for i in range(data.d)],
                     [[t, e, s] + list(row) for t, e, s, row in
                      zip(data.task_ids, data.episodes, data.steps, data.rows)])
        seq.fitted.save(self.path(f"{base['method']}.json"))
        references = [agent.reference_return for agent in seq.agents]
        ar.write_json(self.path('references.json'),
                      {'task_set': task_set.identity(), 'returns': dict(zip(task_set.names, references))})
        extra = {}
        if base['method'] == 'pca':
            extra['explained_ratio'] = seq.fitted.explained_ratio
        else:
            extra['recon_mse'] = seq.fitted.recon_mse
            extra['heldout_mse'] = seq.fitted.heldout_mse
        self.write_results(seq.label, task_set, task_set.names, [r.final_return for r in seq.lowdim],
                           references, seq.explained, extra)

    def load_synergy(self):
        path = self.config['transfer']['synergy']
        if not path:
            raise ConfigurationError("transfer.synergy must name a synergy checkpoint")
        model = SynergyModel.load(path).frozen_copy()
        set_path = os.path.join(os.path.dirname(path), 'task_set.json')
        task_set = envs.load_task_set(set_path) if os.path.exists(set_path) else self.task_set()
        if task_set.d != model.d:
            raise ConfigurationError(f"Synergy checkpoint has d={model.d}, task set d={task_set.d}")
        return model, task_set

    def transfer_task(self, task_set):
        name = self.config['transfer']['task']
        if name not in TRANSFER_TASKS:
            raise ConfigurationError(f"Unknown transfer task '{name}' (choices: {sorted(TRANSFER_TASKS)})")
        kind = TRANSFER_TASKS[name]
        if kind == 'orth_valve':
            return envs.make_orthogonal_task(task_set.tasks, 'valve', seed=self.seed)
        return envs.make_unseen_tasks(task_set.tasks, seed=self.seed, kinds=(kind,))[0]

    def transfer(self):
        model, task_set = self.load_synergy()
        task = self.transfer_task(task_set)
        cfg = self.train_config(iterations=self.config['transfer']['iterations'])
        reference = self.config['train']['reference_returns'].get(task.name)
        if reference is None:
            logger.warning(f"No reference return for {task.name}; training a full-dimensional agent "
                           f"for {cfg.iterations} iterations, the transfer budget")
            reference = baselines.train_independent(task, cfg, out_dir=self.out_dir).reference_return
        result = transfer.transfer_train(model, task, cfg, reference, task_set.tasks, out_dir=self.out_dir)
        ar.write_csv(self.path('transfer_curves.csv'), ['arm', 'seed', 'iteration', 'eval_return', 'train_return'],
                     [['synergy', result.seed, r['iteration'], r['eval_return'], r['train_return']]
                      for r in result.curves])
        ar.write_csv(self.path('first_reward.csv'), ['arm', 'seed', 'first_reward_step'],
                     [['synergy', result.seed, _step_cell(result.first_reward_step)]])
        self.write_results(f"transfer-{task.name}", task_set, [task.name], [result.final_return], [reference], None,
                           {'auc': result.auc, 'decoder_digest': result.decoder_digest})

    def sparse_bench(self):
        model, task_set = self.load_synergy()
        task = envs.make_sparse_valve(task_set.tasks)
        settings = self.config['transfer']
        bench = transfer.sparse_benchmark(model, task, self.train_config(), settings['budget'], settings['seeds'])
        curves, firsts = [], []
        for arm, runs in (('synergy', bench.synergy), ('full', bench.full)):
            for run in runs:
                firsts.append([arm, run.seed, _step_cell(run.first_reward_step)])
                curves += [[arm, run.seed, r['iteration'], r['eval_return'], r['train_return']] for r in run.curves]
        ar.write_csv(self.path('transfer_curves.csv'), ['arm', 'seed', 'iteration', 'eval_return', 'train_return'],
                     curves)
        ar.write_csv(self.path('first_reward.csv'), ['arm', 'seed', 'first_reward_step'], firsts)
        ar.write_json(self.path('results.json'), {
            'command': 'sparse-bench', 'method': 'sparse-bench', 'task_set': task_set.identity(), 'tasks': [],
            'budget_steps': bench.budget_steps,
            'median_first_reward_step': {'synergy': bench.synergy_median, 'full': bench.full_median},
            'auc': {'synergy': [r.auc for r in bench.synergy], 'full': [r.auc for r in bench.full]},
        })

    def analyze(self):
        run_dir = self.config['analyze']['run']
        if not run_dir:
            raise ConfigurationError("analyze.run must name a train-discosyn run directory")
        ar.write_json(self.path('analysis.json'),
                      ar.analyze_run(run_dir, self.config['eval']['episodes'], self.seed))

    def evaluate(self):
        run_dir = self.config['eval']['run']
        if not run_dir:
            raise ConfigurationError("eval.run must name a run directory")
        task_set = envs.load_task_set(os.path.join(run_dir, 'task_set.json'))
        policy = TaskPolicy.load(os.path.join(run_dir, 'policy.json'))
        model = SynergyModel.load(os.path.join(run_dir, 'synergy.json'))
        returns = discorl.evaluate(policy, model, task_set.tasks, self.config['eval']['episodes'],
                                   derive_seed(self.seed, 'eval'))
        ar.write_csv(self.path('eval.csv'), ['task', 'eval_return'], list(zip(task_set.names, returns)))

    def report(self):
        ar.report(self.config['report']['runs'], self.out_dir)


def _step_cell(step):
    return 'none' if step is None else int(step)
