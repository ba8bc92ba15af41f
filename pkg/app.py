"""
DLL Laboratory - Main Application
Flask application whose command group generates datasets, trains the operator
encoder, the diffusion last layer and the deterministic FNO baseline, and
evaluates them on stochastic pairs and closed-loop rollouts.
"""
import csv
import os
import sys
import traceback
from functools import wraps

# config pins BLAS threads; keep it ahead of anything numerical
from config import THREADS_PINNED_EARLY, RunConfig, config  # isort: skip

import click
import numpy as np
from flask import Flask

from analysis import kl, metrics
from analysis import rollout as rollouts
from models import bundle as bundles
from models.baseline import train_fno
from models.db import Artifact, RunLog, db, init_db
from models.dll_head import sample, train_dll
from models.operator_encoder import reconstruction_nrmse, train_operator_encoder
from models.training import smoothed, write_curve
from solvers.datasets import (KIND_PAIRS, STOCHASTIC_SYSTEMS, build_stepper, ensemble_set, generate_pairs,
                              read_dataset, write_dataset)
from utils import rng as rng_streams
from utils.digest import format_digest
from utils.errors import ConfigurationError, DllError, NumericsError, PrerequisiteError

# Initialize Flask app
app = Flask(__name__)

env = os.getenv('DLL_ENV', 'development')
try:
    app.config.from_object(config[env])
except KeyError:
    print(f"⚠️ Unknown DLL_ENV '{env}', using development configuration")
    app.config.from_object(config['development'])

if not THREADS_PINNED_EARLY:
    print("⚠️ numpy was imported before config; BLAS thread pins may not apply")

try:
    init_db(app)
except Exception as e:
    print(f"⚠️ Run registry initialization failed: {e}")


# ============= REGISTRY =============

def start_run(command):
    """Open a RunLog row; the registry never blocks a command"""
    try:
        run = RunLog(command=command)
        db.session.add(run)
        db.session.commit()
        return run
    except Exception as e:
        db.session.rollback()
        print(f"⚠️ Could not log run in the registry: {e}")
        return None


def record_artifact(run, kind, path, digest=None, upstream=None):
    if run is None:
        return
    try:
        db.session.add(Artifact(run_id=run.id, kind=kind, path=os.path.abspath(path),
                                digest=format_digest(digest) if digest is not None else None,
                                upstream_digest=format_digest(upstream) if upstream is not None else None))
        db.session.commit()
    except Exception as e:
        db.session.rollback()
        print(f"⚠️ Could not record artifact {path}: {e}")


def describe_run(run, cfg, directory):
    """Attach config details to the run row and emit run.cfg / run.digest"""
    cfg.write(directory)
    if run is None:
        return
    run.system = cfg.system
    run.seed = cfg.seed
    run.config_digest = format_digest(cfg.digest())
    run.output_dir = os.path.abspath(directory)
    db.session.commit()


# ============= DECORATORS =============

def handle_errors(command):
    """Decorator turning DllError into a ❌ line and the category exit code"""
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            run = start_run(command)
            try:
                result = f(run, *args, **kwargs)
            except DllError as e:
                click.echo(f"❌ {e.category} error: {e}", err=True)
                if app.config.get('DEBUG'):
                    traceback.print_exc()
                if run is not None:
                    run.mark_failed(e)
                sys.exit(e.exit_code)
            except Exception as e:
                click.echo(f"❌ Unexpected error: {e}", err=True)
                traceback.print_exc()
                if run is not None:
                    run.mark_failed(e)
                sys.exit(1)
            if run is not None:
                run.mark_succeeded()
            return result
        return decorated_function
    return decorator


def run_options(f):
    """Options shared by every laboratory command"""
    f = click.option('--config', 'config_path', type=click.Path(), default=None,
                     help='Flat KEY=value run configuration file')(f)
    f = click.option('--system', default=None, help='sburgers, darcy, ks or kolmogorov')(f)
    f = click.option('--scale', default=None, help='desk (default) or paper preset')(f)
    f = click.option('--seed', type=int, default=None, help='Run seed (overrides SEED)')(f)
    f = click.option('--out', 'out_dir', type=click.Path(), default=None,
                     help='Run directory (default DLL_OUTPUT_DIR/<system>-<scale>-s<seed>)')(f)
    f = click.option('--set', 'assignments', multiple=True, help='KEY=VALUE override, repeatable')(f)
    return f


def load_run_config(config_path, system, scale, seed, assignments):
    overrides = {}
    for item in assignments:
        if '=' not in item:
            raise ConfigurationError(f'--set expects KEY=VALUE, got {item!r}')
        key, value = item.split('=', 1)
        overrides[key.strip()] = value.strip()
    if seed is not None:
        overrides['SEED'] = seed
    return RunConfig.load(config_path, system=system, scale=scale, overrides=overrides)


def run_root(cfg, out_dir):
    return out_dir or os.path.join(app.config['DLL_OUTPUT_DIR'], f"{cfg.system}-{cfg['SCALE']}-s{cfg.seed}")


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f'Cannot create output directory {path}: {e}') from e
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f'Output directory {path} is not writable')
    return path


def training_dtype():
    precision = app.config.get('DLL_PRECISION', 'float64')
    if precision not in ('float64', 'float32'):
        raise ConfigurationError(f'DLL_PRECISION must be float64 or float32, got {precision}')
    return np.dtype(precision)


# ============= DATA HELPERS =============

def dataset_path(root, split):
    return os.path.join(root, 'data', f'{split}.dlld')


def load_split(root, split, expected_digest=None):
    path = dataset_path(root, split)
    if not os.path.exists(path):
        raise PrerequisiteError(f'Dataset split {split} not found at {path}; run gen first')
    return read_dataset(path, expected_digest)


def heldout_split(system):
    return 'eval' if system in STOCHASTIC_SYSTEMS else 'val'


def normalized_pairs(dataset, first_realization=False):
    """(a, u) one-step pairs in normalized units"""
    if dataset.kind == KIND_PAIRS and first_realization:
        a, u = dataset.inputs, dataset.outputs[:, 0]
    else:
        a, u = dataset.training_pairs()
    norm = dataset.normalization
    return norm.encode_input(a), norm.encode_output(u)


def evaluation_conditions(root, cfg, digest):
    """Conditioning inputs (M, *S) and truth ensembles (M, R, *S) in physical units"""
    if cfg.system in STOCHASTIC_SYSTEMS:
        ds = load_split(root, 'eval', digest)
        return ds, ds.inputs, ds.outputs
    ds = load_split(root, 'test', digest)
    return ds, ds.outputs[:, 0], ds.outputs[:, 1:2]


def checkpoint_path(root, kind):
    return os.path.join(root, kind, f'{kind}.dllm')


def load_checkpoint(root, kind, dataset_digest):
    path = checkpoint_path(root, kind)
    if not os.path.exists(path):
        raise PrerequisiteError(f'No {kind} checkpoint at {path}; run train-{kind} first')
    checkpoint = bundles.read_bundle(path, expected_kind=kind)
    bundles.check_dataset(checkpoint, dataset_digest, path)
    return checkpoint


def write_rows(path, rows):
    """Dict rows to CSV, header from the first row"""
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def checkpoint_meta(cfg, dataset):
    return {'system': cfg.system, 'seed': cfg.seed, 'dataset_digest': dataset.config_digest,
            'config_digest': cfg.digest(), 'normalization': dataset.normalization.as_array().tolist(),
            'precision': training_dtype().name}


# ============= DATASETS =============

@app.cli.command('gen')
@run_options
@handle_errors('gen')
def cmd_gen(run, config_path, system, scale, seed, out_dir, assignments):
    """Generate every split of a benchmark dataset"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'data'))
    describe_run(run, cfg, directory)

    click.echo(f"🚀 Generating {cfg.system} ({cfg['SCALE']}, N={cfg['GRID_N']}, seed {cfg.seed})")
    splits = generate_pairs(cfg.system, cfg['DATA_TRAIN'], cfg['DATA_EVAL_INPUTS'], cfg['DATA_REALIZATIONS'],
                            cfg.seed, cfg.system_settings(), verbose=True)
    for split, dataset in splits.items():
        path = dataset_path(root, split)
        write_dataset(path, dataset, dtype=cfg['DATA_DTYPE'])
        record_artifact(run, 'dataset', path, dataset.config_digest)
        summary = ', '.join(f'{k}={v:.4g}' if isinstance(v, float) else f'{k}={v}'
                            for k, v in dataset.summary().items())
        click.echo(f"📊 {summary}")
    click.echo(f"✅ Datasets written to {directory}")


# ============= TRAINING =============

@app.cli.command('train-encoder')
@run_options
@handle_errors('train-encoder')
def cmd_train_encoder(run, config_path, system, scale, seed, out_dir, assignments):
    """Stage 1: operator encoder (NF, NO) on the reconstruction loss"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'encoder'))
    describe_run(run, cfg, directory)

    train = load_split(root, 'train')
    held = load_split(root, heldout_split(cfg.system), train.config_digest)
    a, u = normalized_pairs(train)
    model, result = train_operator_encoder(a, u, train.cell_volume, cfg.train_settings('encoder', app.config['DLL_LOG_EVERY']),
                                           cfg['MODEL_LATENT_DIM'], cfg['MODEL_WIDTH'], cfg['MODEL_MODES'],
                                           cfg.seed, heldout=normalized_pairs(held, True), verbose=True,
                                           dtype=training_dtype())
    checkpoint = bundles.encoder_bundle(model, result, checkpoint_meta(cfg, train))
    path = checkpoint_path(root, 'encoder')
    digest = bundles.write_bundle(path, checkpoint)
    write_curve(os.path.join(directory, 'encoder_curve.csv'), result.curve)
    record_artifact(run, 'checkpoint', path, digest, train.config_digest)
    click.echo(f"📊 Operator encoder: {result.parameters} parameters, final loss {result.final_loss:.4e}")
    click.echo(f"✅ Encoder checkpoint {format_digest(digest)} written to {path}")


@app.cli.command('train-dll')
@run_options
@handle_errors('train-dll')
def cmd_train_dll(run, config_path, system, scale, seed, out_dir, assignments):
    """Stage 2: diffusion last layer with the operator encoder frozen"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'dll'))
    describe_run(run, cfg, directory)

    train = load_split(root, 'train')
    encoder_file = checkpoint_path(root, 'encoder')
    if not os.path.exists(encoder_file):
        raise PrerequisiteError(f'train-dll needs an encoder checkpoint at {encoder_file}; run train-encoder first')
    encoder_checkpoint = load_checkpoint(root, 'encoder', train.config_digest)
    encoder = encoder_checkpoint.build_encoder()
    held = load_split(root, heldout_split(cfg.system), train.config_digest)

    a, u = normalized_pairs(train)
    head, result = train_dll(encoder, a, u, cfg.train_settings('dll', app.config['DLL_LOG_EVERY']),
                             cfg['MODEL_WIDTH'], cfg['MODEL_MODES'], cfg['MODEL_HIDDEN'], cfg.seed,
                             heldout=normalized_pairs(held, True), verbose=True, dtype=training_dtype())
    checkpoint = bundles.dll_bundle(head, result, encoder, encoder_checkpoint.digest, checkpoint_meta(cfg, train))
    path = checkpoint_path(root, 'dll')
    digest = bundles.write_bundle(path, checkpoint)
    write_curve(os.path.join(directory, 'dll_curve.csv'), result.curve)
    record_artifact(run, 'checkpoint', path, digest, encoder_checkpoint.digest)

    trend = smoothed([row['train_loss'] for row in result.curve if row['epoch'] > 0])
    if trend.size and trend[-1] < trend[0]:
        click.echo(f"✅ Smoothed velocity loss decreased {trend[0]:.4e} -> {trend[-1]:.4e}")
    else:
        click.echo("⚠️ Smoothed velocity loss did not decrease")
    click.echo(f"📊 Diffusion last layer: {result.parameters} parameters")
    click.echo(f"✅ DLL checkpoint {format_digest(digest)} written to {path}")


@app.cli.command('train-fno')
@run_options
@handle_errors('train-fno')
def cmd_train_fno(run, config_path, system, scale, seed, out_dir, assignments):
    """Deterministic FNO baseline trained with MSE"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'fno'))
    describe_run(run, cfg, directory)

    train = load_split(root, 'train')
    held = load_split(root, heldout_split(cfg.system), train.config_digest)
    a, u = normalized_pairs(train)
    model, result = train_fno(a, u, cfg.train_settings('fno', app.config['DLL_LOG_EVERY']), cfg['MODEL_WIDTH'],
                              cfg['MODEL_MODES'], cfg.seed, heldout=normalized_pairs(held, True), verbose=True,
                              dtype=training_dtype())
    checkpoint = bundles.fno_bundle(model, result, checkpoint_meta(cfg, train))
    path = checkpoint_path(root, 'fno')
    digest = bundles.write_bundle(path, checkpoint)
    write_curve(os.path.join(directory, 'fno_curve.csv'), result.curve)
    record_artifact(run, 'checkpoint', path, digest, train.config_digest)
    click.echo(f"📊 Deterministic FNO: {result.parameters} parameters, final loss {result.final_loss:.4e}")
    click.echo(f"✅ FNO checkpoint {format_digest(digest)} written to {path}")


# ============= EVALUATION =============

def dll_ensembles(checkpoint, norm, inputs, K, steps, seed):
    head = checkpoint.build_dll()
    encoder = checkpoint.build_encoder()
    return [norm.decode_output(sample(norm.encode_input(a), head, encoder, K, steps,
                                      seed=rng_streams.child_seed(seed, 'eval', j)))
            for j, a in enumerate(inputs)]


def fno_ensembles(checkpoint, norm, inputs):
    model = checkpoint.build_fno()
    predictions = norm.decode_output(model.predict(norm.encode_input(inputs)))
    return [p[None] for p in predictions]


def parse_models(value):
    names = [name.strip() for name in value.split(',') if name.strip()]
    unknown = sorted(set(names) - {'dll', 'fno'})
    if unknown:
        raise ConfigurationError(f'Unknown models: {", ".join(unknown)} (expected dll, fno)')
    return names


@app.cli.command('eval')
@run_options
@click.option('--models', default='dll,fno', help='Comma-separated checkpoints to score (dll, fno)')
@click.option('-K', '--ensemble', type=int, default=None, help='Ensemble size (SAMPLER_ENSEMBLE)')
@click.option('--self-eval', is_flag=True, help='Score the truth ensembles against themselves')
@click.option('--reconstruction', is_flag=True, help='Report operator-encoder reconstruction error')
@click.option('--dump-fields', is_flag=True, help='Write mean/std maps in the dataset format')
@handle_errors('eval')
def cmd_eval(run, config_path, system, scale, seed, out_dir, assignments, models, ensemble, self_eval,
             reconstruction, dump_fields):
    """Distributional metrics per condition for each model"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'eval'))
    describe_run(run, cfg, directory)

    train = load_split(root, 'train')
    digest = train.config_digest
    dataset, inputs, truths = evaluation_conditions(root, cfg, digest)
    norm = dataset.normalization
    K = ensemble or cfg['SAMPLER_ENSEMBLE']
    meta = {'system': cfg.system, 'K': K, 'dataset_digest': format_digest(digest)}

    predictions, parameters = {}, {}
    if self_eval:
        predictions['truth'] = list(truths)
    for name in ([] if self_eval else parse_models(models)):
        checkpoint = load_checkpoint(root, name, digest)
        parameters[name] = sum(checkpoint.summary()['parameters'].values())
        click.echo(f"🚀 Sampling {name} on {len(inputs)} conditions")
        if name == 'dll':
            predictions[name] = dll_ensembles(checkpoint, norm, inputs, K, cfg['SAMPLER_STEPS'], cfg.seed)
        else:
            predictions[name] = fno_ensembles(checkpoint, norm, inputs)

    summary = []
    for name, ensembles in predictions.items():
        report = metrics.evaluate_ensembles(ensembles, list(truths), cfg['EVAL_PROJECTIONS'], cfg.seed,
                                            dict(meta, model=name))
        path = os.path.join(directory, f'{name}_metrics.csv')
        report.to_csv(path)
        record_artifact(run, 'report', path, upstream=digest)
        means = report.means
        summary.append(dict({'model': name, 'parameters': parameters.get(name, 0)}, **means))
        click.echo(f"📊 {name}: " + ' '.join(f'{k} {v:.4f}' for k, v in means.items()))
        flagged = sum(1 for row in report.rows if row['flags'])
        if flagged:
            click.echo(f"⚠️ {name}: {flagged} condition(s) flagged (zero truth spread)")

        if dump_fields:
            stacked = np.stack([np.stack([e.mean(axis=0), e.std(axis=0)]) for e in ensembles])
            maps = ensemble_set(stacked, 'samples', dataset.lengths, digest,
                                {'model': name, 'fields': ['mean', 'std'], 'system': cfg.system},
                                inputs=np.asarray(inputs))
            path = os.path.join(directory, f'{name}_fields.dlld')
            write_dataset(path, maps)
            record_artifact(run, 'fields', path, digest)

    if dump_fields:
        truth_maps = np.stack([np.stack([t.mean(axis=0), t.std(axis=0)]) for t in truths])
        path = os.path.join(directory, 'truth_fields.dlld')
        write_dataset(path, ensemble_set(truth_maps, 'samples', dataset.lengths, digest,
                                         {'model': 'truth', 'fields': ['mean', 'std'], 'system': cfg.system},
                                         inputs=np.asarray(inputs)))
        record_artifact(run, 'fields', path, digest)

    if reconstruction:
        source = checkpoint_path(root, 'dll')
        kind = 'dll' if os.path.exists(source) else 'encoder'
        encoder = load_checkpoint(root, kind, digest).build_encoder()
        a = np.repeat(inputs, truths.shape[1], axis=0)
        u = truths.reshape((-1,) + truths.shape[2:])
        error = reconstruction_nrmse(encoder, norm.encode_input(a), norm.encode_output(u))
        ratio = int(np.prod(dataset.spatial_shape)) // encoder.latent_dim
        path = os.path.join(directory, 'reconstruction.csv')
        write_rows(path, [{'system': cfg.system, 'latent_dim': encoder.latent_dim, 'compression': ratio,
                           'nrmse': error, 'parameters': encoder.num_parameters()}])
        record_artifact(run, 'report', path, upstream=digest)
        click.echo(f"📊 Operator encoder reconstruction NRMSE {error:.4e} at compression x{ratio}")

    if summary:
        path = os.path.join(directory, 'summary.csv')
        write_rows(path, summary)
        record_artifact(run, 'report', path, upstream=digest)
    click.echo(f"✅ Evaluation written to {directory}")


@app.cli.command('rollout')
@run_options
@click.option('--models', default='dll,fno', help='Comma-separated checkpoints to roll out (dll, fno)')
@click.option('--perfect', is_flag=True, help='Also roll out the reference solver itself')
@click.option('--identity', is_flag=True, help='Also roll out the persistence forecast')
@click.option('--horizon', type=int, default=None, help='Rollout steps (EVAL_ROLLOUT_HORIZON)')
@click.option('-K', '--ensemble', type=int, default=None, help='Members per generative rollout')
@click.option('--snapshot-steps', default='', help='Comma-separated steps to dump ensembles at')
@click.option('--trajectories', type=int, default=0, help='Use only the first N test trajectories')
@handle_errors('rollout')
def cmd_rollout(run, config_path, system, scale, seed, out_dir, assignments, models, perfect, identity,
                horizon, ensemble, snapshot_steps, trajectories):
    """Closed-loop rollouts on the test trajectories"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'rollout'))
    describe_run(run, cfg, directory)

    train = load_split(root, 'train')
    digest = train.config_digest
    test = load_split(root, 'test' if train.kind != KIND_PAIRS else 'eval', digest)
    if test.kind == KIND_PAIRS:
        raise PrerequisiteError(f'{cfg.system} holds one-step pairs; rollouts need a trajectory dataset')
    if trajectories:
        test = test.subset(np.arange(min(trajectories, test.n_items)))
    try:
        steps = tuple(int(s) for s in snapshot_steps.split(',') if s.strip())
    except ValueError as e:
        raise ConfigurationError(f'--snapshot-steps expects integers, got {snapshot_steps!r}') from e
    rcfg = rollouts.RolloutConfig(horizon or cfg['EVAL_ROLLOUT_HORIZON'], ensemble or cfg['SAMPLER_ENSEMBLE'],
                                  seed=cfg.seed, sampler_steps=cfg['SAMPLER_STEPS'], snapshot_steps=steps)

    norm = test.normalization
    surrogates = []
    if perfect:
        surrogates.append(rollouts.SolverSurrogate(build_stepper(cfg.system_settings())))
    if identity:
        surrogates.append(rollouts.IdentitySurrogate())
    for name in parse_models(models) if models else []:
        checkpoint = load_checkpoint(root, name, digest)
        if name == 'dll':
            surrogates.append(rollouts.DllSurrogate(checkpoint.build_dll(), checkpoint.build_encoder(), norm,
                                                    cfg['SAMPLER_STEPS']))
        else:
            surrogates.append(rollouts.FnoSurrogate(checkpoint.build_fno(), norm))
    if not surrogates:
        raise ConfigurationError('Nothing to roll out: give --models, --perfect or --identity')

    curves_by_model = {}
    for surrogate in surrogates:
        click.echo(f"🚀 Rolling out {surrogate.name}: {test.n_items} trajectories x {rcfg.horizon} steps")
        records = rollouts.run_rollouts(surrogate, test, rcfg, verbose=True)
        report, curves = rollouts.aggregate(records, {'model': surrogate.name, 'system': cfg.system,
                                                      'horizon': rcfg.horizon, 'K': rcfg.ensemble_size})
        curves_by_model[surrogate.name] = curves
        path = os.path.join(directory, f'{surrogate.name}_summary.csv')
        report.to_csv(path)
        record_artifact(run, 'report', path, upstream=digest)
        path = os.path.join(directory, f'{surrogate.name}_steps.csv')
        write_rows(path, curves)
        record_artifact(run, 'curve', path, upstream=digest)

        means = report.means
        click.echo(f"📊 {surrogate.name}: NRMSE {means['NRMSE']:.4f} CRPS {means['CRPS']:.4f} SSR {means['SSR']:.4f}"
                   f" (NRMSE trend {rollouts.step_trend(curves):+.2f})")
        truncated = [r.index for r in records if r.truncated]
        if truncated:
            click.echo(f"⚠️ {surrogate.name}: {len(truncated)} rollout(s) truncated on non-finite states")

        for step in rcfg.snapshot_steps:
            frames = [r.snapshots[step] for r in records if step in r.snapshots]
            if len(frames) != len(records):
                continue
            path = os.path.join(directory, f'{surrogate.name}_snapshot_{step}.dlld')
            write_dataset(path, ensemble_set(np.stack(frames), 'snapshot', test.lengths, digest,
                                             {'model': surrogate.name, 'step': step, 'system': cfg.system},
                                             inputs=test.outputs[:, 0]))
            record_artifact(run, 'fields', path, digest)

    path = os.path.join(directory, 'curves.csv')
    rollouts.write_curves_csv(path, curves_by_model)
    record_artifact(run, 'curve', path, upstream=digest)
    click.echo(f"✅ Rollout curves written to {directory}")


@app.cli.command('kl-report')
@run_options
@handle_errors('kl-report')
def cmd_kl_report(run, config_path, system, scale, seed, out_dir, assignments):
    """Empirical KL spectra of every evaluation condition"""
    cfg = load_run_config(config_path, system, scale, seed, assignments)
    root = run_root(cfg, out_dir)
    directory = ensure_dir(os.path.join(root, 'kl'))
    describe_run(run, cfg, directory)
    if cfg.system not in STOCHASTIC_SYSTEMS:
        raise PrerequisiteError(f'{cfg.system} is deterministic; KL spectra need multiple realizations per input')

    dataset = load_split(root, 'eval')
    eigen_rows, tail_rows = kl.spectrum_rows(dataset, cfg['MODEL_LATENT_DIM'])
    for name, rows in (('spectrum', eigen_rows), ('tail', tail_rows)):
        path = os.path.join(directory, f'kl_{name}.csv')
        write_rows(path, rows)
        record_artifact(run, 'report', path, upstream=dataset.config_digest)
    r = cfg['MODEL_LATENT_DIM']
    tails = [row['optimal_error'] / row['trace'] for row in tail_rows if row['rank'] == r and row['trace'] > 0]
    if tails:
        click.echo(f"📊 Mean relative KL tail at rank {r}: {np.mean(tails):.4e}")
    click.echo(f"✅ KL report written to {directory}")


# ============= MAINTENANCE =============

@app.cli.command('selfcheck')
@click.option('--quick', is_flag=True, help='Skip the slower oracle suites')
@handle_errors('selfcheck')
def cmd_selfcheck(run, quick):
    """Run the oracle suites"""
    from selfcheck import run_checks

    failures = run_checks(quick=quick)
    if failures:
        raise NumericsError(f'{len(failures)} self-check(s) failed: {", ".join(failures)}')
    click.echo("✅ All self-checks passed")


@app.cli.command('init-db')
def cmd_init_db():
    """Create the run registry tables"""
    db.create_all()
    click.echo("✅ Run registry tables created")


if __name__ == '__main__':
    with app.app_context():
        app.cli.main()
