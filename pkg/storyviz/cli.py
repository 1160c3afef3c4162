"""Command-line surface: ``python -m storyviz <command>``.

Everything a command writes lands under the run's output directory:

    data/        ShapeStories (or any Pororo-SV style corpus) on disk
    snapshots/   frozen captioner / classifier / H-DAMSM
    checkpoints/ GAN training checkpoints (epoch_XXX.pt, best.pt, last.pt)
    logs/        line-delimited loss log
    reports/     MetricReport JSON and per-frame prediction dumps
    grids/       generated image grids
    runs.db      run database read by the results browser
"""

import functools
import json
import logging
from pathlib import Path

import click
import numpy as np
import torch

from .captioner import greedy_token_accuracy, pretrain_captioner
from .config import OUTPUT_ROOT_ENV, load_config
from .data import export_pororo_sv, generate_shape_stories, load_pororo_sv, make_batch, split_dataset
from .data.story import StoryBatch
from .database import RunDatabase
from .errors import ConfigError, DataIntegrityError, StoryVizError
from .evaluation import MetricSuite, load_snapshot, snapshot_path
from .evaluation.characters import quality_rows, train_char_classifier
from .evaluation.damsm import train_h_damsm
from .generator import save_story_grid
from .training import Trainer, load_generator

logger = logging.getLogger("storyviz")

PRETRAINABLE = ("captioner", "classifier", "damsm")


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except StoryVizError as e:
            raise click.ClickException(" ".join(str(e).split()))
        except (OSError, ValueError, KeyError) as e:
            raise click.ClickException(f"{type(e).__name__}: {' '.join(str(e).split())}")

    return wrapper


class Workspace:
    """Resolved config plus the output-directory layout."""

    def __init__(self, cfg, data_dir=None):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.data_dir = Path(data_dir) if data_dir else self.root / "data"
        self.snapshots = self.root / "snapshots"
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"
        self.grids = self.root / "grids"

    @property
    def db(self):
        self.root.mkdir(parents=True, exist_ok=True)
        return RunDatabase(self.root / "runs.db")

    def load(self, split, required=True):
        d = self.cfg.data
        try:
            return load_pororo_sv(self.data_dir, split, d.image_size, d.max_caption_len)
        except DataIntegrityError:
            if required:
                raise
            logger.warning("⚠️ split %s is empty or missing, falling back to train", split)
            return None


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config file.")
@click.option("--preset", type=click.Choice(["desk", "paper"]), help="Size preset (default: desk).")
@click.option("--seed", type=int, help="Run seed; overrides the config file.")
@click.option("--out", "output_dir", envvar=OUTPUT_ROOT_ENV, type=click.Path(file_okay=False),
              help=f"Output directory (env {OUTPUT_ROOT_ENV}; default ./runs).")
@click.option("--data-dir", type=click.Path(file_okay=False),
              help="Dataset directory in Pororo-SV layout (default <out>/data); gen-data only writes inside <out>.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Config override such as train.lambda_dual=0.5; repeatable, wins over the file.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress at INFO level.")
@click.pass_context
def cli(ctx, config_path, preset, seed, output_dir, data_dir, overrides, verbose):
    """Story visualization: data, metric models, GAN training, evaluation and generation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(config_path, preset, overrides, output_dir, seed)
    except StoryVizError as e:
        raise click.ClickException(str(e))
    ctx.obj = Workspace(cfg, data_dir)


@cli.command("gen-data")
@click.pass_obj
@handle_errors
def cmd_gen_data(ws):
    """Generate ShapeStories and write train/val/test to the data directory."""
    cfg = ws.cfg
    if not ws.data_dir.resolve().is_relative_to(ws.root.resolve()):
        raise ConfigError(f"gen-data writes only under the output directory {ws.root}; got --data-dir {ws.data_dir}")
    corpus = generate_shape_stories(cfg.data, cfg.seed)
    splits = split_dataset(corpus, cfg.data.val_fraction, cfg.data.test_fraction, cfg.seed)
    export_pororo_sv(splits, ws.data_dir)
    checksums = {name: ds.checksum() for name, ds in splits.items()}
    checksums["all"] = corpus.checksum()
    (ws.data_dir / "checksums.json").write_text(json.dumps(checksums, indent=1) + "\n", encoding="utf-8")
    click.secho(f"✅ {len(corpus)} stories written to {ws.data_dir}", fg="green")
    click.echo(f"checksum {checksums['all']}")


@cli.command("pretrain")
@click.argument("which", type=click.Choice(PRETRAINABLE))
@click.pass_obj
@handle_errors
def cmd_pretrain(ws, which):
    """Train and freeze one metric/dual model: captioner, classifier or damsm."""

    cfg = ws.cfg
    train_ds = ws.load("train")
    val_ds = ws.load("val", required=False) or train_ds
    if which == "captioner":
        model = pretrain_captioner(train_ds, val_ds, cfg.mart, cfg.captioner, cfg.seed)
        click.echo(f"held-out greedy token accuracy: {100 * greedy_token_accuracy(model, val_ds):.2f}%")
    elif which == "classifier":
        model = train_char_classifier(train_ds, val_ds, cfg.classifier, cfg.seed)
        for row in quality_rows(model.quality):
            click.echo("  ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    else:
        model = train_h_damsm(train_ds, cfg.damsm, cfg.seed)
    path = model.save_snapshot(snapshot_path(ws.snapshots, which))
    click.secho(f"✅ {which} snapshot saved to {path}", fg="green")


@cli.command("train")
@click.option("--epochs", type=int, help="Override train.epochs.")
@click.option("--max-steps", type=int, help="Stop after this many training steps.")
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), help="Checkpoint to resume from.")
@click.option("--name", default="story-gan", show_default=True, help="Run name in the run database.")
@click.pass_obj
@handle_errors
def cmd_train(ws, epochs, max_steps, resume, name):
    """Adversarial training with the frozen captioner as dual network."""

    cfg = ws.cfg
    train_ds = ws.load("train")
    val_ds = ws.load("val", required=False)
    vocab_hash = train_ds.vocab.checksum()
    captioner = load_snapshot(ws.snapshots, "captioner", {"vocab_hash": vocab_hash, "image_size": cfg.data.image_size})
    classifier = None
    if snapshot_path(ws.snapshots, "classifier").exists():
        classifier = load_snapshot(ws.snapshots, "classifier", {"image_size": cfg.data.image_size})
    else:
        logger.warning("⚠️ no classifier snapshot: per-epoch validation char-F1 is skipped")
    db = ws.db
    run_id = db.create_run(name, cfg)
    trainer = Trainer(cfg, train_ds, captioner, val_ds, classifier, run_dir=ws.root, db=db, run_id=run_id)
    if resume:
        trainer.load_checkpoint(resume)
    try:
        history = trainer.train(epochs=epochs, max_steps=max_steps)
    except StoryVizError:
        db.finish_run(run_id, "failed")
        raise
    db.finish_run(run_id)
    last = history[-1] if history else None
    click.secho(f"✅ trained {trainer.counters['steps']} steps (run {run_id})", fg="green")
    if last is not None:
        click.echo(f"last step: kl={last.kl:.4f} g_adv={last.g_adv:.4f} dual={last.dual:.4f} "
                   f"d_img={last.d_img:.4f} d_story={last.d_story:.4f} char={last.char:.4f}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Training checkpoint.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), help="Override eval.split.")
@click.pass_obj
@handle_errors
def cmd_eval(ws, checkpoint, split):
    """Compute every metric for a checkpoint and write a MetricReport."""

    cfg = ws.cfg
    dataset = ws.load(split or cfg.eval.split)
    suite = MetricSuite(ws.snapshots, dataset.vocab.checksum(), cfg.data.image_size)
    generator = load_generator(checkpoint, cfg, len(dataset.vocab))
    report = suite.full_report(generator, dataset, cfg.seed, cfg.eval, checkpoint_id=str(checkpoint), report_dir=ws.reports)
    ws.db.save_metric_report(report, report_path=report.metadata.get("report_file"))
    click.echo(report.to_json())


def _read_captions_file(path, story_length):
    """JSON list of stories, each a list of ``story_length`` caption strings."""
    try:
        stories = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataIntegrityError(f"captions file {path} is not valid JSON: {e}")
    if not isinstance(stories, list) or not stories:
        raise DataIntegrityError(f"captions file {path} must hold a non-empty list of stories")
    for i, story in enumerate(stories):
        if not isinstance(story, list) or len(story) != story_length:
            raise DataIntegrityError(f"story {i} in {path} must have exactly {story_length} captions")
    return stories


@cli.command("generate")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Training checkpoint.")
@click.option("--captions-file", type=click.Path(dir_okay=False, exists=True),
              help="JSON list of stories (lists of captions); default: stories from --split.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="val", show_default=True)
@click.option("--num-stories", type=int, default=8, show_default=True)
@click.option("--output", "output_name", default="stories.png", show_default=True, help="Grid file name under grids/.")
@click.pass_obj
@handle_errors
def cmd_generate(ws, checkpoint, captions_file, split, num_stories, output_name):
    """Render stories to an image grid (ground-truth row above each generated row)."""

    cfg = ws.cfg
    dataset = ws.load(split)
    generator = load_generator(checkpoint, cfg, len(dataset.vocab))
    real = None
    if captions_file:
        stories = _read_captions_file(captions_file, cfg.data.story_length)
        pairs = [[dataset.vocab.encode(c, dataset.max_caption_len) for c in story] for story in stories]
        tokens = torch.from_numpy(np.stack([np.stack([p[0] for p in story]) for story in pairs]))
        mask = torch.from_numpy(np.stack([np.stack([p[1] for p in story]) for story in pairs]))
    else:
        batch: StoryBatch = make_batch(dataset, range(min(num_stories, len(dataset))))
        tokens, mask, real = batch.tokens, batch.mask, batch.images
    rng = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        frames = generator(tokens, mask, generator=rng).frames
    ws.grids.mkdir(parents=True, exist_ok=True)
    path = save_story_grid(ws.grids / output_name, frames, real)
    click.secho(f"✅ {len(frames)} stories rendered to {path}", fg="green")


def main():
    cli(prog_name="storyviz")


if __name__ == "__main__":
    main()


