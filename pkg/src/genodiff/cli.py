"""Command-line pipeline: simulate -> embed -> train -> generate -> evaluate/augment, plus gradcheck and report.

All artifacts of a run live in one output directory. Each carries the hash of the
config sections it depends on, and ``manifest.json`` records per-stage sha256
digests of inputs and outputs so that stale or edited files are rejected.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, grad_check, no_grad
from .autodiff.gradcheck import primitive_cases, weighted_sum
from .backbones import (
    GatedCombo,
    build_preset,
    count_flops,
    count_params,
    lambda_curve,
    load_model,
    preset_depth,
    save_model,
)
from .cohort import read_cohort, read_cohort_header, simulate_cohort, split_dataset, substream, write_cohort
from .config import ConfigFieldError, RunConfig, load_config
from .ddpm import SampleRequest, loss_vs_noise_report, sample, train, write_curve_csv, write_metrics_csv
from .embed import EmbeddingModel, EmbeddingTensor, fit_embedding, load_tensor, padded_gene_count, \
    reconstruction_report, save_tensor
from .evaluation import (
    EvalReport,
    augmentation_experiment,
    distance_audit,
    export_projection,
    nnaa,
    privacy_loss,
    recovery_rate,
    train_classifier,
    write_augmentation_csv,
)

log = logging.getLogger("genodiff")

EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH, EXIT_CHECK = 1, 2, 3, 4, 5
SPLITS = ("train", "val", "test")


class PipelineError(Exception):
    code = EXIT_OTHER
    kind = "error"


class MissingInput(PipelineError):
    code, kind = EXIT_MISSING, "missing_input"

    def __init__(self, path: Path, command: str):
        super().__init__(f"missing input {path} (run {command} first)")
        self.path, self.command = path, command


class HashMismatch(PipelineError):
    code, kind = EXIT_MISMATCH, "hash_mismatch"


class CheckFailed(PipelineError):
    code, kind = EXIT_CHECK, "check_failed"


# ---------------------------------------------------------------------------
# run directory bookkeeping
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Output directory of one run plus its manifest."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.run.out_dir)
        self.manifest_path = self.dir / "manifest.json"

    def path(self, name: str) -> Path:
        return self.dir / name

    def load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"version": __version__, "stages": {}}

    def recorded_digest(self, path: Path) -> str | None:
        for stage in self.load_manifest()["stages"].values():
            if path.name in stage.get("outputs", {}):
                return stage["outputs"][path.name]
        return None

    def require(self, name: str, producer: str) -> Path:
        """Existing input file whose digest matches the one its producing stage recorded."""
        p = self.path(name)
        if not p.exists():
            raise MissingInput(p, producer)
        want = self.recorded_digest(p)
        if want is not None and sha256_file(p) != want:
            raise HashMismatch(f"digest of {p} does not match the manifest (file changed after {producer}; rerun it)")
        return p

    def check_hash(self, path: Path, found: str | None, producer: str) -> None:
        want = self.cfg.stage_hash(producer)
        if found != want:
            raise HashMismatch(f"{path} was written under config {found}, current config gives {want} "
                               f"(rerun {producer})")

    def record(self, stage: str, inputs: list[Path], outputs: list[Path], seconds: float) -> None:
        m = self.load_manifest()
        m["version"] = __version__
        m["stages"][stage] = {
            "config_hash": self.cfg.stage_hash(stage),
            "inputs": {p.name: sha256_file(p) for p in inputs},
            "outputs": {p.name: sha256_file(p) for p in outputs},
            "seconds": round(seconds, 3),
        }
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _csv_hash(path: Path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    return first.split()[-1] if first.startswith("# config ") else None


def _prepend_comment(path: Path, text: str) -> None:
    body = path.read_text(encoding="utf-8")
    path.write_text(f"# {text}\n{body}", encoding="utf-8")


def _write_csv(path: Path, comment: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def _load_embedding(run: Run) -> EmbeddingModel:
    p = run.require("embedding.bin", "embed")
    model, manifest = EmbeddingModel.load(p)
    run.check_hash(p, manifest.get("config_hash"), "embed")
    return model


def _load_tensor(run: Run, name: str, producer: str) -> EmbeddingTensor:
    p = run.require(name, producer)
    e, manifest = load_tensor(p)
    run.check_hash(p, manifest.get("config_hash"), producer)
    return e


def _load_cohort(run: Run, name: str):
    p = run.require(name, "simulate")
    run.check_hash(p, read_cohort_header(p).get("config_hash"), "simulate")
    return read_cohort(p)


def _load_model(run: Run):
    run.require("model.params", "train")
    p = run.require("model.json", "train")
    model, manifest = load_model(run.path("model"))
    run.check_hash(p, manifest.get("config_hash"), "train")
    return model


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_simulate(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    m, g = simulate_cohort(cfg.sim_config())
    parts = split_dataset(m, cfg.simulate.split, seed=cfg.seed)
    extra = {"config_hash": cfg.stage_hash("simulate")}
    outs = [run.path("cohort.txt")]
    write_cohort(outs[0], m, g, extra)
    for name, part in zip(SPLITS, parts):
        outs.append(run.path(f"{name}.txt"))
        write_cohort(outs[-1], part, g, extra)
    log.info("simulated %d samples, %d SNPs in %d genes", m.n_samples, m.n_snps, g.n_genes)
    return [], outs


def cmd_embed(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    data = {name: _load_cohort(run, f"{name}.txt") for name in SPLITS}
    g = data["train"][1]
    emb = fit_embedding(data["train"][0], g, cfg.embed.variance_target, cfg.embed_depth(),
                        full_rank=cfg.embed.full_rank)
    h = {"config_hash": cfg.stage_hash("embed")}
    outs = [run.path("embedding.bin")]
    emb.save(outs[0], extra=h)
    report = {"config_hash": h["config_hash"], "n_padded": emb.n_padded, "depth": emb.depth,
              "n_components_total": int(emb.n_components.sum()),
              "degenerate_genes": list(emb.degenerate_genes)}
    for name in SPLITS:
        m = data[name][0]
        e = emb.encode(m)
        if np.any(e.values[:, ~emb.mask]):
            raise PipelineError(f"encode produced non-zero padding for {name}")
        outs.append(run.path(f"{name}.emb"))
        save_tensor(outs[-1], e, extra=h)
        report[f"mismatch_rate_{name}"] = reconstruction_report(emb, m)["mismatch_rate"]
    outs.append(run.path("embed_report.json"))
    outs[-1].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("embedding: G_pad %d, %d components, train mismatch %.4f", emb.n_padded,
             report["n_components_total"], report["mismatch_rate_train"])
    return [run.path(f"{n}.txt") for n in SPLITS], outs


def cmd_train(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    emb = _load_embedding(run)
    tr = _load_tensor(run, "train.emb", "embed")
    va = _load_tensor(run, "val.emb", "embed")
    mask = emb.mask
    n_classes = len(tr.label_names)
    model = build_preset(cfg.model.preset, emb.n_padded, n_classes, substream(cfg.seed, "init"), mask,
                         n_steps=cfg.train.n_steps)
    tc = cfg.train_config()
    result = train(model, tr.values, tr.labels, tc, mask, va.values, va.labels)
    h = cfg.stage_hash("train")
    save_model(run.path("model"), model, extra={"config_hash": h, "label_names": tr.label_names})
    outs = [run.path("model.params"), run.path("model.json"), run.path("metrics.csv"), run.path("loss_vs_noise.csv")]
    write_metrics_csv(outs[2], result.history, header_comment=f"config {h}")
    y_val = va.labels if tc.conditional else None
    rows = loss_vs_noise_report(model, va.values, y_val, tc.schedule(), mask, cfg.train.loss_curve_bins, cfg.seed)
    write_curve_csv(outs[3], rows)
    _prepend_comment(outs[3], f"config {h}")
    if isinstance(model, GatedCombo):
        grid = np.arange(1, tc.n_steps + 1)
        outs.append(run.path("lambda.csv"))
        _write_csv(outs[-1], f"config {h}", ["t", "lambda"],
                   [[int(t), repr(float(v))] for t, v in zip(grid, lambda_curve(model, grid))])
    log.info("trained %s: final val loss %s, skipped steps %d", cfg.model.preset, result.final_val_loss,
             result.skipped_steps)
    return [run.path(n) for n in ("embedding.bin", "train.emb", "val.emb")], outs


def generation_labels(cfg: RunConfig, n_classes: int) -> np.ndarray:
    n = cfg.generate.n_samples
    if cfg.generate.label == "balanced":
        counts = np.full(n_classes, n // n_classes)
        counts[:n % n_classes] += 1
        return np.repeat(np.arange(n_classes), counts)
    return np.full(n, int(cfg.generate.label))


def cmd_generate(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    model = _load_model(run)
    emb = _load_embedding(run)
    mask = emb.mask
    label_names = _load_tensor(run, "train.emb", "embed").label_names
    labels = generation_labels(cfg, len(label_names))
    req = SampleRequest(cfg.generate.n_samples, labels.tolist() if cfg.train.conditional else None, cfg.seed,
                        len(label_names))

    def guard(t, x):
        if np.any(x[:, ~mask]):
            raise PipelineError(f"sampler state has non-zero padding at t={t}")

    x = sample(model, cfg.train_config().schedule(), req, mask, cfg.generate.batch_size, on_step=guard)
    h = {"config_hash": cfg.stage_hash("generate")}
    e = EmbeddingTensor(x, True, labels, list(label_names))
    outs = [run.path("samples.emb"), run.path("samples.txt")]
    save_tensor(outs[0], e, extra=h)
    write_cohort(outs[1], emb.decode(e), emb.gene_map, h)
    log.info("generated %d samples", len(x))
    return [run.path(n) for n in ("model.params", "model.json", "embedding.bin", "train.emb")], outs


def cmd_evaluate(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    emb = _load_embedding(run)
    mask = emb.mask
    tr, te = _load_tensor(run, "train.emb", "embed"), _load_tensor(run, "test.emb", "embed")
    syn = _load_tensor(run, "samples.emb", "generate")
    real_all = _load_cohort(run, "cohort.txt")[0]
    syn_geno = run.require("samples.txt", "generate")
    run.check_hash(syn_geno, read_cohort_header(syn_geno).get("config_hash"), "generate")
    syn_m = read_cohort(syn_geno)[0]
    R, E, S = tr.values[:, mask], te.values[:, mask], syn.values[:, mask]
    spec = cfg.classifier_spec()
    k = len(tr.label_names)

    clf_real, a_r = train_classifier(R, tr.labels, spec, E, te.labels, n_classes=k)
    _, a_s = train_classifier(S, syn.labels, spec, E, te.labels, n_classes=k)
    cond = clf_real.accuracy(S, syn.labels)
    pl = privacy_loss(R, E, S, seed=cfg.seed)
    aa_t, aa_s = nnaa(R, S, seed=cfg.seed)
    geno = distance_audit(real_all.values.astype(np.float64), syn_m.values.astype(np.float64))
    emb_audit = distance_audit(R, S)
    h = cfg.stage_hash("evaluate")
    report = EvalReport(
        a_r=a_r, a_s=a_s, recovery_rate=recovery_rate(a_r, a_s),
        aa_truth_train=pl["aa_truth_train"], aa_syn_train=pl["aa_syn_train"],
        aa_truth_test=pl["aa_truth_test"], aa_syn_test=pl["aa_syn_test"],
        privacy_loss=pl["privacy_loss"], privacy_loss_truth_only=pl["privacy_loss_truth_only"],
        min_l1=geno["min_l1"], min_l2=geno["min_l2"], min_cosine=geno["min_cosine"],
        duplicate_count=geno["duplicate_count"], conditional_accuracy=cond,
        extra={
            "config_hash": h,
            "nnaa_n": pl["n"],
            "nnaa_train_reference": {"aa_truth": aa_t, "aa_syn": aa_s, "n": min(len(R), len(S))},
            "embedding_audit": emb_audit,
            "n_train": len(R), "n_test": len(E), "n_synthetic": len(S),
        },
    )
    outs = [run.path("report.json"), run.path("projection.csv")]
    outs[0].write_text(report.to_json())
    export_projection({"train": R, "test": E, "synthetic": S}, outs[1])
    _prepend_comment(outs[1], f"config {h}")
    log.info("a_r %.3f a_s %.3f R %.3f cond %.3f AA(train ref) %.3f/%.3f duplicates %d", a_r, a_s,
             report.recovery_rate, cond, aa_t, aa_s, report.duplicate_count)
    inputs = [run.path(n) for n in ("embedding.bin", "train.emb", "test.emb", "samples.emb", "samples.txt",
                                    "cohort.txt")]
    return inputs, outs


def cmd_augment(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    emb = _load_embedding(run)
    mask = emb.mask
    tr, te = _load_tensor(run, "train.emb", "embed"), _load_tensor(run, "test.emb", "embed")
    syn = _load_tensor(run, "samples.emb", "generate")
    if syn.n_samples < tr.n_samples:
        raise PipelineError(f"augment tops every fraction up to {tr.n_samples} training samples but only "
                            f"{syn.n_samples} synthetic ones exist; raise generate.n_samples and rerun generate")
    rows = augmentation_experiment(tr.values[:, mask], tr.labels, syn.values[:, mask], syn.labels,
                                   te.values[:, mask], te.labels, cfg.augment.fractions, cfg.classifier_spec(),
                                   seed=cfg.seed)
    out = run.path("augmentation.csv")
    write_augmentation_csv(out, rows, header_comment=f"config {cfg.stage_hash('augment')}")
    for r in rows:
        log.info("fraction %.2f real-only %s augmented %s", r.fraction, r.acc_real_only, r.acc_augmented)
    return [run.path(n) for n in ("embedding.bin", "train.emb", "test.emb", "samples.emb")], [out]


def gradcheck_rows(cfg: RunConfig) -> list[list]:
    """(target, seed, max relative error, pass/fail) for every primitive and preset over the configured seeds."""
    gc = cfg.gradcheck
    rows = []
    if gc.primitives:
        for s in range(gc.seeds):
            for name, fn, arrays in primitive_cases(substream(cfg.seed, "gradcheck-primitives", s)):
                rng = substream(cfg.seed, "gradcheck-weights", s)
                err = grad_check(weighted_sum(fn, rng), [Tensor(a) for a in arrays])
                rows.append([f"primitive:{name}", s, repr(float(err)), "pass" if err < gc.tolerance else "fail"])
    for name in gc.presets:
        for s in range(gc.seeds):
            rng = substream(cfg.seed, "gradcheck", s)
            n_padded = max(8, 2 ** preset_depth(name))
            mask = np.zeros((n_padded, 8), dtype=bool)
            for gene in range(n_padded - 1):
                mask[gene, :rng.integers(1, 9)] = True
            model = build_preset(name, n_padded, 2, rng, mask)
            # zero-initialised layers would hide upstream gradients
            for p in model.parameters():
                if not p.data.any():
                    p.data[:] = rng.normal(0.0, 0.1, p.shape)
            x = Tensor(rng.standard_normal((2, n_padded, 8)))
            t = rng.integers(1, 1001, 2).astype(float)
            y = rng.integers(0, 2, 2)
            w = Tensor(rng.standard_normal(x.shape))
            with no_grad():
                scale = float(np.abs((model(x, t, y) * w).data).sum())
            err = grad_check(lambda *_: (model(x, t, y) * w).sum(), [x] + model.parameters(),
                             max_coords=gc.max_coords, rng=rng, scale=scale)
            rows.append([f"preset:{name}", s, repr(float(err)), "pass" if err < gc.tolerance else "fail"])
            log.info("gradcheck %s seed %d: %.2e", name, s, err)
    return rows


def cmd_gradcheck(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    rows = gradcheck_rows(cfg)
    out = run.path("gradcheck.csv")
    _write_csv(out, f"config {cfg.stage_hash('gradcheck')}", ["target", "seed", "max_rel_error", "result"], rows)
    failed = [r for r in rows if r[3] == "fail"]
    if failed:
        run.record("gradcheck", [], [out], 0.0)
        raise CheckFailed(f"{len(failed)} of {len(rows)} gradient checks above {cfg.gradcheck.tolerance}: "
                          + ", ".join(f"{r[0]}/seed{r[1]}" for r in failed))
    return [], [out]


def cmd_report(run: Run) -> tuple[list, list]:
    cfg = run.cfg
    n_genes = cfg.simulate.n_genes
    rows = []
    for name in cfg.report.presets:
        depth = max(preset_depth(name), cfg.embed_depth())
        n_padded = padded_gene_count(n_genes, depth)
        model = build_preset(name, n_padded, cfg.simulate.n_populations, substream(cfg.seed, "init"))
        rows.append([name, n_padded, count_params(model), count_flops(model, 1)])
    inputs = []
    if run.path("model.json").exists():
        model = _load_model(run)
        inputs = [run.path("model.params"), run.path("model.json")]
        rows.append([f"trained:{cfg.model.preset}", model.input_shape[0], count_params(model), count_flops(model, 1)])
    out = run.path("model_report.csv")
    _write_csv(out, f"config {cfg.stage_hash('report')}", ["model", "n_padded", "parameters", "flops_per_sample"],
               rows)
    return inputs, [out]


COMMANDS = {
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "augment": cmd_augment,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def run_stage(cfg: RunConfig, command: str) -> Run:
    run = Run(cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    inputs, outputs = COMMANDS[command](run)
    run.record(command, inputs, outputs, time.perf_counter() - t0)
    return run


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (unsigned 64-bit), overrides run.seed")
    common.add_argument("--out", type=Path, help="output directory, overrides run.out_dir")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="genodiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"genodiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate a labelled cohort and split it",
        "embed": "fit per-gene PCA and encode every split",
        "train": "train the diffusion noise predictor",
        "generate": "sample synthetic embeddings and decode them",
        "evaluate": "classifier, NNAA and distance metrics",
        "augment": "real-vs-augmented classifier accuracy",
        "gradcheck": "finite-difference checks on backbone presets",
        "report": "parameter and flop table",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _fail(kind: str, message: str, code: int, **fields) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **fields}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.config is not None and not args.config.exists():
        return _fail("config", f"config file {args.config} does not exist", EXIT_CONFIG, field="--config")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, None if args.out is None else str(args.out))
    except ConfigFieldError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, field=exc.field)
    try:
        run = run_stage(cfg, args.command)
    except MissingInput as exc:
        return _fail(exc.kind, str(exc), exc.code, path=str(exc.path), command=exc.command)
    except PipelineError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except Exception as exc:  # noqa: BLE001 - every failure leaves as a JSON error line
        return _fail(type(exc).__name__, str(exc), EXIT_OTHER)
    print(json.dumps({"command": args.command, "out": str(run.dir), "config_hash": cfg.stage_hash(args.command)},
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
