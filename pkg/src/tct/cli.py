"""Command-line pipeline: generate, pretrain, embed, train-classifier, evaluate, analyze, all."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .data import (FeatureSchema, chrono_split, default_schema, eligible, fit_standardizer,
                   generate_synthetic, read_events_csv, write_events_csv)
from .downstream import (MODES, GBDTModel, build_features, extract_embeddings, fit_rows,
                         predict_risk, read_embeddings_csv, read_scores_csv, write_embeddings_csv,
                         write_scores_csv)
from .encoder import EncoderConfig, prepare, window_encodings
from .evaluation import (cap_curve, cosine_window_analysis, metrics, pca_project,
                         write_projection_csv, write_roc_csv)
from .trainer import CheckpointError, TrainConfig, load_checkpoint, pretrain

log = logging.getLogger("tct")

EVENTS = "events.csv"
SCHEMA = "schema.json"
CHECKPOINT = "checkpoint.tct"
TRAIN_LOG = "train_log.jsonl"
EMBEDDINGS = "embeddings.csv"


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing prerequisite {path} (produced by `tct {producer}`)")


class Run:
    """Paths and shared loading logic for one output directory."""

    def __init__(self, cfg: RunConfig, out: Path, command: str):
        self.cfg = cfg
        self.out = out
        self.command = command
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(p, producer)
        return p

    def mode_dir(self, mode: str) -> Path:
        d = self.out / mode
        d.mkdir(exist_ok=True)
        return d

    def provenance(self, **extra) -> dict:
        return {"tool": "tct", "version": __version__, "command": self.command,
                "config": self.cfg.to_dict(),
                "seeds": {"data": self.cfg.data.seed, "train": self.cfg.train.seed}, **extra}

    def write_json(self, path: Path, doc: dict) -> None:
        doc = dict(doc, provenance=self.provenance())
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def parties(self):
        return read_events_csv(self.need(EVENTS, "generate"))

    def split(self):
        return chrono_split(self.parties())

    def schema(self) -> FeatureSchema:
        return FeatureSchema.load(self.need(SCHEMA, "pretrain"))

    def encoder_config(self, schema: FeatureSchema) -> EncoderConfig:
        m = self.cfg.model
        return EncoderConfig.from_schema(
            schema, d_e=m.d_e, d_h=m.d_h, horizons=m.horizons, context_mode=m.context_mode,
            static_context=m.static_context, k_global=m.K_global, local_window=m.L_local,
            precision=m.precision)

    def encoder(self):
        ckpt = self.need(CHECKPOINT, "pretrain")
        schema = self.schema()
        return load_checkpoint(ckpt, self.encoder_config(schema)), schema


# --- subcommands ------------------------------------------------------------------------


def cmd_generate(run: Run, args) -> None:
    d = run.cfg.data
    parties = generate_synthetic(d.n_parties, d.fraud_fraction, d.seed)
    write_events_csv(parties, run.path(EVENTS))
    log.info("wrote %d parties to %s", len(parties), run.path(EVENTS))


def cmd_pretrain(run: Run, args) -> None:
    split = run.split()
    train, rejected = eligible(split.train)
    m, t = run.cfg.model, run.cfg.train
    schema = fit_standardizer(train, default_schema(m.d_e))
    schema.save(run.path(SCHEMA), provenance=run.provenance())
    enc_cfg = run.encoder_config(schema)
    items = prepare(train, schema, m.K_global, m.L_local)
    tcfg = TrainConfig(batch_size=t.batch_size, epochs=t.epochs, max_lr=t.max_lr,
                       weight_decay=t.weight_decay, tau=t.tau, seed=t.seed,
                       checkpoint=str(run.path(CHECKPOINT)))
    result = pretrain(items, enc_cfg, tcfg, log_path=run.path(TRAIN_LOG))
    last = result.history[-1]
    log.info("pre-trained on %d parties (%d too short): loss %.4f, accuracy %.4f",
             len(items), len(rejected), last.l_total, last.accuracy)


def cmd_embed(run: Run, args) -> None:
    encoder, schema = run.encoder()
    embs, excluded = extract_embeddings(encoder, run.parties(), schema)
    write_embeddings_csv(embs, run.path(EMBEDDINGS))
    log.info("embedded %d parties, excluded %d", len(embs), len(excluded))


def _rows(run: Run, parties, mode: str):
    embs = read_embeddings_csv(run.need(EMBEDDINGS, "embed")) if mode != "raw" else None
    return build_features(parties, mode, embs)


def cmd_train_classifier(run: Run, args) -> None:
    mode = args.mode or run.cfg.classifier.mode
    split = run.split()
    train_rows, names = _rows(run, split.train, mode)
    test_rows, _ = _rows(run, split.test, mode)
    model = fit_rows(train_rows, mode, run.cfg.classifier.gbdt(), names)
    d = run.mode_dir(mode)
    model.save(d / "model.json", extra=run.provenance(mode=mode))
    scores = predict_risk(model, test_rows, mode, run.cfg.eval.alpha_flag)
    write_scores_csv(scores, d / "scores.csv", {r.party_id: r.label for r in test_rows})
    log.info("%s: %d trees on %d rows, scored %d test parties", mode, len(model.trees),
             len(train_rows), len(scores))


def cmd_evaluate(run: Run, args) -> None:
    mode = args.mode or run.cfg.classifier.mode
    d = run.out / mode
    scores_path = d / "scores.csv"
    if not scores_path.exists():
        raise MissingArtifact(scores_path, f"train-classifier --mode {mode}")
    rows = read_scores_csv(scores_path)
    model = GBDTModel.load(d / "model.json")
    rep, pts = metrics([r["r"] for r in rows], [r["label"] for r in rows], mode)
    doc = dataclasses.asdict(rep)
    doc["feature_names"] = model.feature_names
    run.write_json(d / "metrics.json", doc)
    write_roc_csv(pts, d / "roc.csv")
    write_roc_csv(cap_curve(pts, run.cfg.eval.fpr_cap), d / "roc_capped.csv")
    log.info("%s: AUC %.4f, TPR@FPR=0.10 %.4f", mode, rep.auc, rep.tpr_at_fpr_010)


def cmd_analyze(run: Run, args) -> None:
    encoder, schema = run.encoder()
    parties, _ = eligible(run.parties())
    embs = {e.party_id: e.vector for e in read_embeddings_csv(run.need(EMBEDDINGS, "embed"))}
    parties = [p for p in parties if p.party_id in embs]
    X = np.stack([embs[p.party_id] for p in parties])
    coords, explained = pca_project(X)
    covariate = [float(np.mean([e.amount for e in p.events])) for p in parties]
    write_projection_csv(run.path("projection.csv"), [p.party_id for p in parties], coords,
                         [p.label for p in parties], covariate)
    items = prepare(parties, schema, encoder.config.k_global, encoder.config.local_window)
    summary = cosine_window_analysis(window_encodings(encoder, items), [p.label for p in parties])
    doc = dataclasses.asdict(summary)
    doc["gap"] = summary.gap
    doc["explained_variance"] = [float(x) for x in explained]
    run.write_json(run.path("cosine_summary.json"), doc)
    log.info("neighbor cosine: legit %.4f, fraud %.4f", summary.legit_mean, summary.fraud_mean)


def cmd_all(run: Run, args) -> None:
    for step in (cmd_generate, cmd_pretrain, cmd_embed):
        step(run, args)
    modes = [args.mode] if args.mode else list(MODES)
    for mode in modes:
        sub = argparse.Namespace(**{**vars(args), "mode": mode})
        cmd_train_classifier(run, sub)
        cmd_evaluate(run, sub)
    cmd_analyze(run, args)


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tct", description="Self-supervised transaction encoder pipeline.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    p.add_argument("--mode", choices=MODES, help="classifier feature configuration")
    p.add_argument("--out", default="out", help="artifact directory (default: out)")
    p.add_argument("--seed", type=int, help="override the data and training seeds")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.data.seed = cfg.train.seed = args.seed
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        cfg.validate()
        run = Run(cfg, Path(args.out), args.command)
        run.write_json(run.path("config.effective.json"), cfg.to_dict())
        COMMANDS[args.command](run, args)
    except (ConfigError, MissingArtifact, CheckpointError, ValueError, FloatingPointError) as exc:
        print(f"tct {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
