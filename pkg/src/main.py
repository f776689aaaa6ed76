import sys
import click
import logging

from dotenv import load_dotenv

from src.utils import setup_logger
from src.utils.config import ConfigLoader
from src.utils.errors import OpenWorldError
from src.pipeline import OpenWorldPipeline

EXIT_ERROR = 1
EXIT_THRESHOLD = 2

logger = logging.getLogger("openworld_kit.main")


def _fail(action: str, e: Exception):
    logger.error(f"{action} failed: {e}")
    sys.exit(EXIT_ERROR)


@click.group()
@click.option('--config', '-c', 'config_path', default=None, type=click.Path(exists=True),
              help='Path to config YAML')
@click.option('--seed', type=int, default=None, help='Master seed (system.seed)')
@click.option('--out', 'out_dir', default=None, help='Output directory (system.output_dir)')
@click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
              help='Override any configuration key; repeatable')
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose logging')
@click.pass_context
def cli(ctx, config_path, seed, out_dir, overrides, verbose):
    """Open-world detection toolkit: synthetic worlds, OWEL + MSCAL training, OWOD evaluation."""
    load_dotenv()
    try:
        config = ConfigLoader(config_path, overrides)
        if seed is not None:
            config.set('system.seed', seed)
        if out_dir is not None:
            config.set('system.output_dir', out_dir)
    except (OpenWorldError, FileNotFoundError) as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_ERROR)

    log_level = "DEBUG" if verbose else config.get('system.log_level', 'INFO')
    setup_logger("openworld_kit", log_level=log_level, log_dir=config.get('system.log_dir'))
    ctx.obj = OpenWorldPipeline(config)


@cli.command()
@click.pass_obj
def gen(pipeline):
    """Generate the synthetic world and export train/cal/test splits."""
    try:
        summary = pipeline.gen()
    except Exception as e:
        _fail("World generation", e)
    click.echo(f"{summary['tasks']} tasks, {summary['known']} known classes, {summary['unknown']} unknown")


@cli.command()
@click.option('--task', 'task_id', type=int, required=True, help='Task to train (1-based)')
@click.pass_obj
def train(pipeline, task_id):
    """Train one task; task t > 1 starts from the task t-1 checkpoint."""
    try:
        ckpt = pipeline.train(task_id)
    except Exception as e:
        _fail(f"Training task {task_id}", e)
    click.echo(f"Task {task_id}: {len(ckpt.registry)} classes, theta={ckpt.theta:.6f} "
               f"-> {pipeline.checkpoint_path(task_id)}")


@cli.command()
@click.option('--task', 'task_id', type=int, required=True, help='Checkpoint task')
@click.option('--split', default='test', show_default=True)
@click.option('--no-owel', is_flag=True, help='Use raw w_0 instead of the pseudo-unknown embedding')
@click.option('--no-mscal', is_flag=True, help='Disable the OOD gate (theta = +inf)')
@click.option('--conf', type=float, default=None, help='Override detection.conf_threshold')
@click.option('--name', default=None, help='Detections file stem')
@click.pass_obj
def infer(pipeline, task_id, split, no_owel, no_mscal, conf, name):
    """Detect known and unknown objects in a split."""
    try:
        path = pipeline.infer(task_id, split, use_owel=False if no_owel else None,
                              use_mscal=False if no_mscal else None, conf=conf, name=name)
    except Exception as e:
        _fail("Inference", e)
    click.echo(path)


@cli.command(name='eval')
@click.option('--task', 'task_id', type=int, required=True, help='Task whose registry produced the detections')
@click.option('--detections', 'detections_path', type=click.Path(exists=True), required=True)
@click.option('--split', default='test', show_default=True)
@click.pass_obj
def evaluate(pipeline, task_id, detections_path, split):
    """Score a detections file: mAP, U-Recall, WI, A-OSE."""
    try:
        report, failures = pipeline.evaluate(task_id, detections_path, split)
    except Exception as e:
        _fail("Evaluation", e)
    click.echo(f"mAP both={report.map_both} U-Recall={report.u_recall} WI={report.wi} A-OSE={report.a_ose}")
    if failures:
        for failure in failures:
            logger.error(f"Acceptance threshold not met: {failure}")
        sys.exit(EXIT_THRESHOLD)


@cli.command()
@click.option('--task', 'task_id', type=int, required=True)
@click.option('--param', type=click.Choice(['alpha', 'prompt', 'conf', 'tau']), required=True)
@click.option('--values', default='', help='Comma-separated values; prompt defaults to every bank key')
@click.option('--split', default='test', show_default=True)
@click.option('--retrain', is_flag=True, help='Allow sweeps that need retraining (tau)')
@click.pass_obj
def ablate(pipeline, task_id, param, values, split, retrain):
    """Sweep one parameter and emit one report row per value."""
    parsed = [v.strip() for v in values.split(',') if v.strip()]
    try:
        df = pipeline.ablate(task_id, param, parsed, split, retrain)
    except Exception as e:
        _fail("Ablation", e)
    click.echo(df.to_string(index=False))


@cli.command()
@click.pass_obj
def report(pipeline):
    """Render the markdown summary and the training loss plot."""
    try:
        paths = pipeline.report()
    except Exception as e:
        _fail("Report", e)
    click.echo(paths['summary'])


if __name__ == "__main__":
    cli()
