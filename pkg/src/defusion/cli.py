"""Command-line surface: gen-data, build-dict, train, fuse, eval, ablate.

Every command is deterministic given its flags and seeds, so reruns
produce byte-identical outputs. Multi-file outputs are assembled in a
temp location and promoted atomically. A JSON config file can provide
any setting; explicit flags win over the config.
"""

from __future__ import annotations

import json
import os
import shutil
from contextlib import contextmanager

import click

from . import confounder, metrics, pgm, report, scenegen, training
from .fusionnet import FusionModel, ModelConfig, file_sha256
from .scenegen import BiasProfile

_CONFIG_SCHEMA = {
    "data": {"street", "cloud", "bush", "n", "size", "seed", "out", "split"},
    "dictionary": {"corpus", "modality", "n_clusters", "dim", "seed", "out"},
    "model": {"stem_channels", "feature_channels", "attention_dim", "kernel_size", "seed"},
    "train": {"corpus", "dict_vis", "dict_ir", "lr", "batch_size", "epochs", "crop",
              "seed", "alpha", "beta", "gamma", "out", "no_baffm"},
    "eval": {"corpus", "checkpoint", "out"},
}
_PATH_KEYS = {"out", "corpus", "dict_vis", "dict_ir", "checkpoint"}


class Config:
    """Validated config document with flag-beats-config lookup."""

    def __init__(self, path=None):
        self.sections = {}
        if path is None:
            return
        with open(path) as f:
            doc = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        for section, entries in doc.items():
            if section not in _CONFIG_SCHEMA:
                raise click.ClickException(f"config: unknown section '{section}'")
            unknown = set(entries) - _CONFIG_SCHEMA[section]
            if unknown:
                raise click.ClickException(
                    f"config: unknown keys in [{section}]: {sorted(unknown)}"
                )
            resolved = {}
            for key, value in entries.items():
                if key in _PATH_KEYS and isinstance(value, str):
                    value = value if os.path.isabs(value) else os.path.join(base, value)
                resolved[key] = value
            self.sections[section] = resolved

    def get(self, section, key, flag, default):
        if flag is not None:
            return flag
        return self.sections.get(section, {}).get(key, default)


@contextmanager
def _atomic_dir(out_dir):
    """Assemble outputs in a temp directory, promote atomically on success."""
    tmp = f"{os.fspath(out_dir)}.tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)


@click.group()
def main():
    """Deconfounded infrared/visible image fusion pipeline."""


# ---------------------------------------------------------------------------
# gen-data


@main.command("gen-data")
@click.option("--street", type=float, default=None, help="street scene probability")
@click.option("--cloud", type=float, default=None, help="cloud scene probability")
@click.option("--bush", type=float, default=None, help="bush scene probability")
@click.option("-n", "--count", type=int, default=None, help="number of pairs")
@click.option("--size", type=int, default=None, help="image side in pixels")
@click.option("--seed", type=int, default=None)
@click.option("--split", type=str, default=None, help="split name in the corpus layout")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_dir", type=click.Path(), default=None, required=False)
def cmd_gen_data(street, cloud, bush, count, size, seed, split, config_path, out_dir):
    """Generate a synthetic biased-scene corpus (PGM pairs + manifest)."""
    cfg = Config(config_path)
    probs = {
        "street": cfg.get("data", "street", street, 0.8),
        "cloud": cfg.get("data", "cloud", cloud, 0.1),
        "bush": cfg.get("data", "bush", bush, 0.1),
    }
    count = int(cfg.get("data", "n", count, 100))
    size = int(cfg.get("data", "size", size, 64))
    seed = int(cfg.get("data", "seed", seed, 0))
    split = cfg.get("data", "split", split, "train")
    out_dir = cfg.get("data", "out", out_dir, None)
    if out_dir is None:
        raise click.ClickException("gen-data needs an output directory (--out)")
    try:
        profile = BiasProfile(probs)
        pairs = scenegen.generate_dataset(profile, count, size, seed)
    except scenegen.SceneGenError as e:
        raise click.ClickException(str(e))
    with _atomic_dir(out_dir) as tmp:
        scenegen.write_corpus(pairs, tmp, split=split)
    click.echo(f"wrote {len(pairs)} pairs to {out_dir}")


# ---------------------------------------------------------------------------
# build-dict


@main.command("build-dict")
@click.option("--corpus", type=click.Path(exists=True), default=None, required=False)
@click.option("--modality", type=click.Choice(["infrared", "visible"]), default=None)
@click.option("-N", "--clusters", "n_clusters", type=int, default=None,
              help="dictionary size (number of scene clusters)")
@click.option("-d", "--dim", type=int, default=None, help="reduced feature dimension")
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_file", type=click.Path(), default=None, required=False)
def cmd_build_dict(corpus, modality, n_clusters, dim, seed, config_path, out_file):
    """Build one modality's confounder dictionary from a corpus."""
    cfg = Config(config_path)
    corpus = cfg.get("dictionary", "corpus", corpus, None)
    modality = cfg.get("dictionary", "modality", modality, None)
    n_clusters = int(cfg.get("dictionary", "n_clusters", n_clusters, confounder.DEFAULT_CLUSTERS))
    dim = int(cfg.get("dictionary", "dim", dim, confounder.DEFAULT_DIM))
    seed = int(cfg.get("dictionary", "seed", seed, 0))
    out_file = cfg.get("dictionary", "out", out_file, None)
    if corpus is None or modality is None or out_file is None:
        raise click.ClickException("build-dict needs --corpus, --modality and --out")
    images = scenegen.read_corpus_images(corpus, modality)
    try:
        dictionary = confounder.build_dictionary(images, modality, n_clusters, dim, seed)
    except confounder.DictionaryError as e:
        raise click.ClickException(str(e))
    confounder.save_dictionary(dictionary, out_file)
    click.echo(f"wrote {modality} dictionary (N={n_clusters}, d={dictionary.dim}) to {out_file}")


# ---------------------------------------------------------------------------
# train


def _run_training(out_dir, dataset, dict_vis_path, dict_ir_path, model_cfg,
                  tcfg, lcfg, echo=click.echo):
    """Train into a run directory: config snapshot, loss log + curve, checkpoint."""
    dict_vis = confounder.load_dictionary(dict_vis_path)
    dict_ir = confounder.load_dictionary(dict_ir_path)
    # model init seed rides on the training seed so runs differ by one knob
    model = FusionModel(model_cfg, dict_vis, dict_ir, seed=tcfg.seed)
    with _atomic_dir(out_dir) as tmp:
        vis_copy = os.path.join(tmp, "dict_visible.json")
        ir_copy = os.path.join(tmp, "dict_infrared.json")
        shutil.copyfile(dict_vis_path, vis_copy)
        shutil.copyfile(dict_ir_path, ir_copy)
        snapshot = {
            "model": {**model_cfg.__dict__},
            "train": {**tcfg.__dict__},
            "loss": {**lcfg.__dict__},
            "dataset_size": len(dataset),
        }
        with open(os.path.join(tmp, "config.json"), "w") as f:
            json.dump(snapshot, f, sort_keys=True, indent=2)
            f.write("\n")
        history = training.train(
            model, dataset, tcfg, lcfg,
            on_epoch=lambda e, l: echo(f"epoch {e}: mean loss {l:.6f}"),
        )
        training.write_loss_log(os.path.join(tmp, "loss_log.csv"), history)
        report.save_loss_curve(history, os.path.join(tmp, "loss_curve.png"))
        model.save(
            os.path.join(tmp, "checkpoint.json"),
            dict_vis_ref=("dict_visible.json", file_sha256(vis_copy)),
            dict_ir_ref=("dict_infrared.json", file_sha256(ir_copy)),
            epochs_trained=tcfg.epochs,
        )
    return os.path.join(out_dir, "checkpoint.json")


@main.command("train")
@click.option("--corpus", type=click.Path(exists=True), default=None, required=False)
@click.option("--dict-vis", type=click.Path(), default=None)
@click.option("--dict-ir", type=click.Path(), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--crop", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--alpha", type=float, default=None, help="intensity loss weight")
@click.option("--beta", type=float, default=None, help="gradient loss weight")
@click.option("--gamma", type=float, default=None, help="structural loss weight")
@click.option("--no-baffm", is_flag=True, default=False,
              help="zero and freeze the confounder projections (ablation baseline)")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_dir", type=click.Path(), default=None, required=False)
def cmd_train(corpus, dict_vis, dict_ir, lr, batch_size, epochs, crop, seed,
              alpha, beta, gamma, no_baffm, config_path, out_dir):
    """Train the fusion network; writes a run directory."""
    cfg = Config(config_path)
    corpus = cfg.get("train", "corpus", corpus, None)
    dict_vis = cfg.get("train", "dict_vis", dict_vis, None)
    dict_ir = cfg.get("train", "dict_ir", dict_ir, None)
    out_dir = cfg.get("train", "out", out_dir, None)
    if corpus is None or dict_vis is None or dict_ir is None or out_dir is None:
        raise click.ClickException("train needs --corpus, --dict-vis, --dict-ir and --out")
    for path in (dict_vis, dict_ir):
        if not os.path.exists(path):
            raise click.ClickException(f"missing dictionary file: {path}")

    tcfg = training.TrainConfig(
        lr=float(cfg.get("train", "lr", lr, 1e-4)),
        batch_size=int(cfg.get("train", "batch_size", batch_size, 6)),
        epochs=int(cfg.get("train", "epochs", epochs, 30)),
        crop=int(cfg.get("train", "crop", crop, 32)),
        seed=int(cfg.get("train", "seed", seed, 0)),
    )
    lcfg = training.LossConfig(
        alpha=float(cfg.get("train", "alpha", alpha, 1.0)),
        beta=float(cfg.get("train", "beta", beta, 1.0)),
        gamma=float(cfg.get("train", "gamma", gamma, 0.5)),
    )
    baffm_enabled = not (no_baffm or bool(cfg.get("train", "no_baffm", None, False)))
    model_cfg = ModelConfig(
        stem_channels=int(cfg.get("model", "stem_channels", None, 8)),
        feature_channels=int(cfg.get("model", "feature_channels", None, 16)),
        attention_dim=int(cfg.get("model", "attention_dim", None, 8)),
        kernel_size=int(cfg.get("model", "kernel_size", None, 3)),
        baffm_enabled=baffm_enabled,
    )
    dataset = scenegen.read_corpus(corpus)
    if not dataset:
        raise click.ClickException(f"corpus at {corpus} is empty")
    checkpoint = _run_training(out_dir, dataset, dict_vis, dict_ir, model_cfg, tcfg, lcfg)
    click.echo(f"checkpoint written to {checkpoint}")


# ---------------------------------------------------------------------------
# fuse


@main.command("fuse")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--ir", "ir_path", type=click.Path(exists=True), required=True)
@click.option("--vis", "vis_path", type=click.Path(exists=True), required=True)
@click.option("-o", "--out", "out_path", type=click.Path(), required=True)
def cmd_fuse(checkpoint, ir_path, vis_path, out_path):
    """Fuse one aligned infrared/visible PGM pair."""
    model, _ = FusionModel.load(checkpoint)
    ir = pgm.read_pgm(ir_path)
    vis = pgm.read_pgm(vis_path)
    if ir.shape != vis.shape:
        raise click.ClickException(f"input sizes differ: ir {ir.shape} vs vis {vis.shape}")
    fused = model.fuse(ir, vis)
    pgm.write_pgm(out_path, fused)
    click.echo(f"fused image written to {out_path}")


# ---------------------------------------------------------------------------
# eval


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--corpus", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_csv", type=click.Path(), default=None, required=False)
def cmd_eval(checkpoint, corpus, config_path, out_csv):
    """Evaluate a checkpoint over a corpus; writes the metric CSV and figure."""
    cfg = Config(config_path)
    checkpoint = cfg.get("eval", "checkpoint", checkpoint, None)
    corpus = cfg.get("eval", "corpus", corpus, None)
    out_csv = cfg.get("eval", "out", out_csv, None)
    if checkpoint is None or corpus is None or out_csv is None:
        raise click.ClickException("eval needs --checkpoint, --corpus and --out")
    model, _ = FusionModel.load(checkpoint)
    dataset = scenegen.read_corpus(corpus)
    reports, summary = metrics.evaluate(model, dataset)
    metrics.write_report_csv(out_csv, reports, summary)
    if reports:
        figure_path = os.path.splitext(out_csv)[0] + ".png"
        report.save_metric_figure(reports, summary, figure_path)
        click.echo(f"metrics for {len(reports)} pairs written to {out_csv} (+ {figure_path})")
    else:
        click.echo(f"empty corpus; empty report written to {out_csv}")


# ---------------------------------------------------------------------------
# ablate


@main.command("ablate")
@click.option("--corpus", type=click.Path(exists=True), required=True,
              help="training corpus")
@click.option("--eval-corpus", type=click.Path(exists=True), required=True)
@click.option("--dict-sizes", type=str, default="20,25,30",
              help="comma-separated dictionary sizes to sweep")
@click.option("--with-baseline/--without-baseline", default=True,
              help="include the no-baffm baseline variant")
@click.option("--dim", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--crop", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_dir", type=click.Path(), required=True)
def cmd_ablate(corpus, eval_corpus, dict_sizes, with_baseline, dim, epochs, lr,
               batch_size, crop, seed, config_path, out_dir):
    """Run the ablation sweep: no-baffm baseline and/or dictionary sizes.

    Every variant shares the same data and seeds, so rows differ only
    by the ablated factor. Emits one comparison table plus a figure.
    """
    cfg = Config(config_path)
    try:
        sizes = [int(tok) for tok in dict_sizes.split(",") if tok.strip()]
    except ValueError:
        raise click.ClickException(f"cannot parse --dict-sizes '{dict_sizes}'")
    if not sizes and not with_baseline:
        raise click.ClickException("nothing to ablate")
    dim = int(cfg.get("dictionary", "dim", dim, confounder.DEFAULT_DIM))
    seed = int(cfg.get("train", "seed", seed, 0))
    tcfg = training.TrainConfig(
        lr=float(cfg.get("train", "lr", lr, 1e-4)),
        batch_size=int(cfg.get("train", "batch_size", batch_size, 6)),
        epochs=int(cfg.get("train", "epochs", epochs, 10)),
        crop=int(cfg.get("train", "crop", crop, 32)),
        seed=seed,
    )
    lcfg = training.LossConfig(
        alpha=float(cfg.get("train", "alpha", None, 1.0)),
        beta=float(cfg.get("train", "beta", None, 1.0)),
        gamma=float(cfg.get("train", "gamma", None, 0.5)),
    )
    base_model_cfg = dict(
        stem_channels=int(cfg.get("model", "stem_channels", None, 8)),
        feature_channels=int(cfg.get("model", "feature_channels", None, 16)),
        attention_dim=int(cfg.get("model", "attention_dim", None, 8)),
        kernel_size=int(cfg.get("model", "kernel_size", None, 3)),
    )
    dataset = scenegen.read_corpus(corpus)
    eval_set = scenegen.read_corpus(eval_corpus)

    variants = []
    if with_baseline:
        # baseline pairs with the first swept size (dictionaries are inert
        # under no-baffm but fix the parameter shapes)
        variants.append(("no-baffm", sizes[0] if sizes else confounder.DEFAULT_CLUSTERS, False))
    variants.extend((f"N={n}", n, True) for n in sizes)

    with _atomic_dir(out_dir) as tmp:
        names, summaries = [], []
        for name, n_clusters, baffm_enabled in variants:
            click.echo(f"--- variant {name} ---")
            vdir = os.path.join(tmp, name.replace("=", ""))
            os.makedirs(vdir, exist_ok=True)
            try:
                vis_dict = confounder.build_dictionary(
                    [p.vis for p in dataset], "visible", n_clusters, dim, seed)
                ir_dict = confounder.build_dictionary(
                    [p.ir for p in dataset], "infrared", n_clusters, dim, seed)
            except confounder.DictionaryError as e:
                raise click.ClickException(str(e))
            vis_path = os.path.join(vdir, "dict_visible.json")
            ir_path = os.path.join(vdir, "dict_infrared.json")
            confounder.save_dictionary(vis_dict, vis_path)
            confounder.save_dictionary(ir_dict, ir_path)
            model_cfg = ModelConfig(**base_model_cfg, baffm_enabled=baffm_enabled)
            run_dir = os.path.join(vdir, "run")
            checkpoint = _run_training(run_dir, dataset, vis_path, ir_path,
                                       model_cfg, tcfg, lcfg)
            model, _ = FusionModel.load(checkpoint)
            rows, summary = metrics.evaluate(model, eval_set)
            metrics.write_report_csv(os.path.join(vdir, "eval.csv"), rows, summary)
            names.append(name)
            summaries.append(summary)

        table = os.path.join(tmp, "ablation.csv")
        with open(table, "w", newline="") as f:
            f.write("variant,MI,VIF,Qabf,SSIM\n")
            for name, s in zip(names, summaries):
                f.write(f"{name},{s.mi:.6f},{s.vif:.6f},{s.qabf:.6f},{s.ssim:.6f}\n")
        report.save_ablation_figure(names, summaries, os.path.join(tmp, "ablation.png"))
    click.echo(f"ablation table written to {os.path.join(out_dir, 'ablation.csv')}")


if __name__ == "__main__":
    main()
