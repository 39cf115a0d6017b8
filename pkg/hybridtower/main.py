"""
hybridtower - command-line application
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from hybridtower import __version__
from hybridtower.autograd.tensor import no_grad
from hybridtower.config import ModelDims, RunConfig, ServingConfig, TrainConfig
from hybridtower.data.synthetic import PairedDataset, SyntheticSpec, generate
from hybridtower.errors import ConfigError, DataFormatError, HybridTowerError, TrainingAborted, UsageError
from hybridtower.models import its
from hybridtower.models.hybrid_tower import HybridTowerModel
from hybridtower.serving.flops import account_flops, format_bytes, format_flops
from hybridtower.serving.index import RetrievalIndex, build_index, query
from hybridtower.training.checkpoint import Checkpoint
from hybridtower.training.evaluation import evaluate_split, text_embeddings
from hybridtower.training.experiments import format_ablation_table, its_signal_report, run_ablation
from hybridtower.training.objectives import RetrievalMetrics, compute_metrics
from hybridtower.training.trainer import Trainer, parse_stages
from hybridtower.utils.logger import get_logger, set_level
from hybridtower.utils.report import float_cells, format_table, write_csv

logger = get_logger("main")


class _Parser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting so every failure maps to one exit code table"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridtower", description="Hybrid-Tower text-to-video retrieval on synthetic data")
    parser.add_argument("--version", action="version", version=f"hybridtower {__version__}")
    parser.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--seed", type=int, help="single seed for every random stream")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--no-progress", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    p.add_argument("--spec", type=Path, help="config file with data.* keys (applied over --config)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="run training stages and save a checkpoint")
    p.add_argument("--stage", default="all", help="0, 1, 2, both (1 then 2) or all (0, 1, 2)")
    p.add_argument("--data", type=Path, help="dataset file (generated from the config when omitted)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--log", type=Path, help="training log (default: <out>.log)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("build-index", help="precompute video vectors into an index")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="all", help="train, val, test or all")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("query", help="rank indexed videos for one text")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text-id", type=int, help="use the text paired with this video id (needs --data)")
    group.add_argument("--text-file", type=Path, help="CSV of token rows, d_in floats each")
    p.add_argument("--data", type=Path)
    p.add_argument("--top", type=int)

    p = sub.add_parser("eval", help="retrieval metrics on a split")
    p.add_argument("--index", type=Path)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--force", action="store_true", help="evaluate despite hash mismatches")
    p.add_argument("--baseline", action="store_true", help="rank with the backbone-only video embedding")
    p.add_argument("--its-report", action="store_true", help="also test token selection against signal patches")

    sub.add_parser("bench-flops", help="analytic cost accounting at the configured dims")

    p = sub.add_parser("dump-its", help="write token-selection scores of one video as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--video-id", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("dump-embeddings", help="write t, t_p and v vectors as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train ablation variants under one seed and budget")
    p.add_argument("--data", type=Path)
    p.add_argument("--variants", nargs="+", help="subset of variant names")
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, help="optional CSV of the comparison")
    return parser


class HybridTowerApp:
    """Runs one CLI command against an effective run config"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.progress = not args.no_progress
        self.cfg = RunConfig.load(args.config, args.overrides, args.seed)
        if getattr(args, "spec", None):
            self.cfg.update_from_file(args.spec)
            if args.seed is not None:
                self.cfg.set_seed(args.seed)
        errors = self.cfg.validate()
        if errors:
            for error in errors:
                logger.error(f"  - {error}")
            raise ConfigError(f"{len(errors)} configuration error(s)")

    def handle_command(self, command: str) -> int:
        logger.debug(f"Command: {command}")
        _echo_config("Effective config", self.cfg.hash(), self.cfg.to_text())
        handlers = {
            "gen-data": self._handle_gen_data,
            "train": self._handle_train,
            "build-index": self._handle_build_index,
            "query": self._handle_query,
            "eval": self._handle_eval,
            "bench-flops": self._handle_bench_flops,
            "dump-its": self._handle_dump_its,
            "dump-embeddings": self._handle_dump_embeddings,
            "ablate": self._handle_ablate,
        }
        if command not in handlers:
            raise UsageError(f"Unknown command {command!r}")
        handlers[command]()
        return 0

    # ------------------------------------------------------------ loading

    def _dataset(self, path: Optional[Path]) -> PairedDataset:
        if path is None:
            return generate(SyntheticSpec.from_config(self.cfg))
        return PairedDataset.load(path)

    @staticmethod
    def _load_model(path: Path) -> Tuple[HybridTowerModel, Checkpoint, RunConfig]:
        checkpoint = Checkpoint.load(path)
        cfg = RunConfig.from_text(checkpoint.config_text)
        if checkpoint.config_hash and cfg.hash() != checkpoint.config_hash:
            raise DataFormatError(f"Checkpoint {path} config does not match its embedded hash")
        _echo_config(f"Checkpoint {path} config", checkpoint.config_hash, checkpoint.config_text)
        model = HybridTowerModel(ModelDims.from_config(cfg))
        model.load_state_dict(checkpoint.params)
        return model, checkpoint, cfg

    @staticmethod
    def _check_compatible(dataset: PairedDataset, dims: ModelDims):
        spec = dataset.spec
        if (spec.d_in, spec.frames, spec.patches) != (dims.d_in, dims.frames, dims.patches):
            raise DataFormatError(
                f"Dataset (d_in={spec.d_in}, m={spec.frames}, n={spec.patches}) does not fit the model "
                f"(d_in={dims.d_in}, m={dims.frames}, n={dims.patches})")

    # ------------------------------------------------------------ commands

    def _handle_gen_data(self):
        dataset = generate(SyntheticSpec.from_config(self.cfg))
        dataset.save(self.args.out, self.cfg.hash())
        print(f"dataset={self.args.out} pairs={len(dataset)} splits={'/'.join(map(str, dataset.spec.split_sizes()))} "
              f"config_hash={self.cfg.hash()}")

    def _handle_train(self):
        args = self.args
        stages = parse_stages(args.stage)
        dims = ModelDims.from_config(self.cfg)
        dataset = self._dataset(args.data)
        self._check_compatible(dataset, dims)

        model = HybridTowerModel(dims)
        log_path = args.log or args.out.with_name(args.out.name + ".log")
        trainer = Trainer(model, dataset, TrainConfig.from_config(self.cfg), self.cfg.hash(), self.cfg.to_text(),
                          log_path=log_path, progress=self.progress)
        if args.resume:
            trainer.restore(Checkpoint.load(args.resume))
        elif stages[0] == 2:
            logger.warning("Stage 2 without --resume starts from untrained generator weights")

        try:
            checkpoint = trainer.run(stages)
        except TrainingAborted as e:
            trainer.checkpoint().save(args.out)
            logger.error(f"Training aborted; last good state (step {e.last_good_step}) saved to {args.out}")
            raise
        checkpoint.save(args.out)
        print(f"checkpoint={args.out} step={checkpoint.step} stages={','.join(map(str, checkpoint.completed_stages))} "
              f"model_hash={checkpoint.model_hash} config_hash={checkpoint.config_hash}")

    def _handle_build_index(self):
        args = self.args
        model, checkpoint, cfg = self._load_model(args.ckpt)
        dataset = PairedDataset.load(args.data)
        self._check_compatible(dataset, model.dims)
        rows = dataset.split_indices(args.split)
        index = build_index(model, dataset.videos[rows], dataset.ids[rows],
                            batch_size=ServingConfig.from_config(cfg).batch_size,
                            metadata={"config_hash": checkpoint.config_hash, "split": args.split},
                            progress=self.progress)
        index.save(args.out)
        print(f"index={args.out} videos={len(index)} dim={index.dim} model_hash={index.metadata['model_hash']} "
              f"config_hash={checkpoint.config_hash}")

    def _handle_query(self):
        args = self.args
        model, checkpoint, cfg = self._load_model(args.ckpt)
        index = RetrievalIndex.load(args.index)
        if args.text_id is not None:
            if args.data is None:
                raise UsageError("--text-id needs --data")
            dataset = PairedDataset.load(args.data)
            tokens = dataset.texts[dataset.row_of(args.text_id)]
        else:
            tokens = _read_token_file(args.text_file)
        t = text_embeddings(model, [tokens])[0]
        top = args.top or ServingConfig.from_config(cfg).top
        results = query(index, t, top)
        rows = [[rank, video_id, f"{score:.6f}"] for rank, (video_id, score) in enumerate(results, start=1)]
        print(f"index={args.index} top={len(rows)} config_hash={checkpoint.config_hash}")
        print(format_table(["rank", "video_id", "score"], rows))

    def _handle_eval(self):
        args = self.args
        model, checkpoint, _ = self._load_model(args.ckpt)
        dataset = PairedDataset.load(args.data)
        self._check_compatible(dataset, model.dims)

        if args.baseline:
            t2v, v2t = evaluate_split(model, dataset, args.split, mode="two_tower")
            mode = "two_tower"
        else:
            if args.index is None:
                raise UsageError("eval needs --index unless --baseline is given")
            index = RetrievalIndex.load(args.index)
            self._check_hashes(index, checkpoint)
            t2v, v2t = _index_metrics(model, dataset, index, args.split)
            mode = "hybrid"

        print(t2v.to_line(direction="t2v", split=args.split, mode=mode, config_hash=checkpoint.config_hash))
        print(v2t.to_line(direction="v2t", split=args.split, mode=mode, config_hash=checkpoint.config_hash))
        print(_metrics_table(t2v, v2t))
        if args.its_report:
            print(its_signal_report(model, dataset, args.split).to_line())

    def _check_hashes(self, index: RetrievalIndex, checkpoint: Checkpoint):
        problems = []
        if index.metadata.get("model_hash") != checkpoint.model_hash:
            problems.append("model hash")
        if index.metadata.get("config_hash") != checkpoint.config_hash:
            problems.append("config hash")
        if not problems:
            return
        message = f"Index and checkpoint disagree on {' and '.join(problems)}"
        if not self.args.force:
            raise DataFormatError(message + " (use --force to evaluate anyway)")
        logger.warning(message + "; continuing because of --force")

    def _handle_bench_flops(self):
        dims = ModelDims.from_config(self.cfg)
        report = account_flops(dims)
        print(f"d={dims.width} m={dims.frames} n={dims.patches} k={dims.k} "
              f"online_per_matching={format_flops(report.online_per_matching_flops)} "
              f"storage_per_video={format_bytes(report.storage_bytes_per_video).replace(' ', '')} "
              f"config_hash={self.cfg.hash()}")
        print(report.to_table())

    def _handle_dump_its(self):
        args = self.args
        model, checkpoint, _ = self._load_model(args.ckpt)
        dataset = PairedDataset.load(args.data)
        self._check_compatible(dataset, model.dims)
        row = dataset.row_of(args.video_id)
        dims = model.dims
        with no_grad():
            features = model.encode_videos(dataset.videos[row:row + 1])
        matrix = its.informativeness(features.its_query[0], features.its_keys[0],
                                     model.video_encoder.last_attention_layer,
                                     dims.frames, dims.patches, dims.its_scale)
        order = its.top_k_order(matrix.scores.reshape(-1), dims.k)
        rank_of = {int(flat): rank for rank, flat in enumerate(order, start=1)}
        heads = matrix.per_head.shape[0]
        headers = ["video_id", "frame", "patch", "score"] + [f"head_{h}" for h in range(heads)] + \
                  ["selected", "rank", "signal", "config_hash"]
        rows = []
        for f in range(dims.frames):
            for p in range(dims.patches):
                flat = f * dims.patches + p
                rank = rank_of.get(flat, 0)
                rows.append([args.video_id, f, p, repr(float(matrix.scores[f, p]))]
                            + float_cells(matrix.per_head[:, f, p])
                            + [int(rank > 0), rank, int(dataset.signal_mask[row, f, p]), checkpoint.config_hash])
        write_csv(args.out, headers, rows)
        print(f"its={args.out} video_id={args.video_id} selected={dims.k} rows={len(rows)} "
              f"config_hash={checkpoint.config_hash}")

    def _handle_dump_embeddings(self):
        args = self.args
        model, checkpoint, cfg = self._load_model(args.ckpt)
        dataset = PairedDataset.load(args.data)
        self._check_compatible(dataset, model.dims)
        rows = dataset.split_indices(args.split)
        batch_size = ServingConfig.from_config(cfg).batch_size

        t = text_embeddings(model, dataset.text_batch(rows), batch_size)
        t_p_chunks, v_chunks = [], []
        with no_grad():
            for start in range(0, len(rows), batch_size):
                out = model.forward_video(dataset.videos[rows[start:start + batch_size]])
                t_p_chunks.append(out.t_p.data)
                v_chunks.append(out.v.data)
        t_p = _unit_rows(np.concatenate(t_p_chunks))
        v = _unit_rows(np.concatenate(v_chunks))

        d = model.dims.width
        headers = ["id", "kind"] + [f"x{i}" for i in range(d)] + ["config_hash"]
        out_rows = []
        for i, row in enumerate(rows):
            video_id = int(dataset.ids[row])
            for kind, matrix in (("t", t), ("t_p", t_p), ("v", v)):
                out_rows.append([video_id, kind] + float_cells(matrix[i]) + [checkpoint.config_hash])
        write_csv(args.out, headers, out_rows)
        print(f"embeddings={args.out} items={len(rows)} rows={len(out_rows)} config_hash={checkpoint.config_hash}")

    def _handle_ablate(self):
        args = self.args
        dataset = self._dataset(args.data)
        self._check_compatible(dataset, ModelDims.from_config(self.cfg))
        results = run_ablation(self.cfg, dataset, args.variants, args.split, progress=self.progress)
        for result in results:
            print(result.t2v.to_line(variant=result.name, split=args.split, config_hash=self.cfg.hash()))
        print(format_ablation_table(results))
        if args.out:
            write_csv(args.out, ["variant", "r1", "r5", "r10", "sum_r", "mnr", "v2t_r1", "config_hash"],
                      [r.row() + [self.cfg.hash()] for r in results])


def _echo_config(label: str, config_hash: str, text: str):
    logger.info(f"{label} (config_hash={config_hash}):")
    for line in text.splitlines():
        logger.info(f"  {line}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _read_token_file(path: Path) -> np.ndarray:
    """Token rows from a CSV, with or without a header row"""
    if not path.exists():
        raise DataFormatError(f"Text file not found: {path}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        try:
            return np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
        except ValueError as e:
            raise DataFormatError(f"Cannot parse token rows from {path}: {e}")


def _index_metrics(model: HybridTowerModel, dataset: PairedDataset, index: RetrievalIndex,
                   split: str) -> Tuple[RetrievalMetrics, RetrievalMetrics]:
    """Both-direction metrics with the split's texts against the index restricted to the split's videos"""
    rows = dataset.split_indices(split)
    text_ids = dataset.ids[rows]
    gallery = index.subset(text_ids)
    missing = np.setdiff1d(text_ids.astype(np.uint64), gallery.ids)
    if missing.size:
        raise DataFormatError(f"{missing.size} ground-truth videos are not in the index, e.g. {missing[:5].tolist()}")

    t = text_embeddings(model, dataset.text_batch(rows))
    sim = t @ gallery.vectors.astype(np.float64).T
    column_of = {int(video_id): j for j, video_id in enumerate(gallery.ids)}
    t2v_gt = np.array([column_of[int(video_id)] for video_id in text_ids])
    row_of = {int(video_id): i for i, video_id in enumerate(text_ids)}
    v2t_gt = np.array([row_of[int(video_id)] for video_id in gallery.ids])
    return (compute_metrics(sim, t2v_gt, gallery.ids.astype(np.int64)),
            compute_metrics(sim.T, v2t_gt, text_ids))


def _metrics_table(t2v: RetrievalMetrics, v2t: RetrievalMetrics) -> str:
    rows = [[name, f"{m.r1:.2f}", f"{m.r5:.2f}", f"{m.r10:.2f}", f"{m.sum_r:.2f}", f"{m.mnr:.2f}", f"{m.mdr:.1f}"]
            for name, m in (("text->video", t2v), ("video->text", v2t))]
    return format_table(["direction", "R@1", "R@5", "R@10", "SumR", "MnR", "MdR"], rows)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one command

    Returns:
        0 on success, 2 on usage/config errors, 3 on data/format errors, 1 otherwise
    """
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            set_level(args.log_level)
        return HybridTowerApp(args).handle_command(args.command)
    except HybridTowerError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 1
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
