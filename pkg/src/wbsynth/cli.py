"""Command-line entry point.

    wbsynth gen-data   --out DIR [--n N] [--size S] [--seed K]
    wbsynth train-seg  --out DIR
    wbsynth train-reg  --out DIR [--resume]
    wbsynth train-syn  --out DIR [--from DIR] [--resume]
    wbsynth eval       --out DIR [--from DIR]
    wbsynth gradcheck  --out DIR
    wbsynth mine-sanity --out DIR
    wbsynth report     --out DIR

All commands accept ``--config PATH`` and repeatable ``--set key=value``.
Each command writes ``run_<command>.json`` provenance into --out.
Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
The only environment input is WBSYNTH_THREADS (torch thread count, default 1).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import evalkit, gradcheck, phantom, semalign, train
from .config import ConfigError, RunConfig, load_config
from .nets import load_checkpoint, save_checkpoint
from .volumes import write_volume

log = logging.getLogger("wbsynth")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
CASE_FILES = ("mr_ip", "mr_op", "ct", "labels", "moved_ct", "activity")


class MissingArtifact(RuntimeError):
    pass


class CheckFailed(RuntimeError):
    pass


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _threads():
    raw = os.environ.get("WBSYNTH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"WBSYNTH_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("WBSYNTH_THREADS must be >= 1")
    torch.set_num_threads(n)
    return n


def _write_tsv(path: Path, header: List[str], rows: List[List]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _load_net(path: Path, key: str, what: str):
    nets, extra = load_checkpoint(_require(path, what))
    if key not in nets:
        raise MissingArtifact(f"{path} holds no {key!r} network")
    return nets[key], extra


# ---------------------------------------------------------------------------
# commands; each returns {artifact name: path}
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    t = cfg.train
    size = args.size if args.size is not None else t.size
    n = args.n if args.n is not None else t.n_cases
    seed = args.seed if args.seed is not None else t.data_seed
    if n < 1:
        raise ConfigError("--n must be >= 1")
    artifacts = {}
    lines = [f"seed\t{seed}", f"size\t{size}", f"magnitude\t{t.magnitude}", f"slip\t{t.slip}", f"n\t{n}"]
    for i in range(n):
        try:
            case = phantom.generate(seed * 100_000 + i, size, t.magnitude, t.slip)
        except phantom.PhantomConfigError as exc:
            raise ConfigError(str(exc)) from None
        case_dir = out / f"case_{i:04d}"
        case_dir.mkdir(parents=True, exist_ok=True)
        for name in CASE_FILES:
            path = case_dir / f"{name}.vol"
            write_volume(getattr(case, name), path)
            digest = file_hash(path)
            lines.append(f"{case_dir.name}/{path.name}\t{digest}")
            artifacts[f"{case_dir.name}/{path.name}"] = path
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    artifacts["manifest.txt"] = manifest
    return artifacts


def cmd_train_seg(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    t = cfg.train
    cases = train.make_cases(t)
    try:
        net = semalign.train_proxy_segmenter(cases, steps=t.seg_steps, batch=t.batch, lr=t.seg_lr,
                                             seed=t.seed)
    except semalign.SegmenterQualityError as exc:
        raise CheckFailed(str(exc)) from None
    dice = semalign.evaluate_segmenter(net, train.make_cases(t, held_out=True))
    path = out / "segmenter.pt"
    save_checkpoint(path, {"segmenter": net}, {"dice": dice})
    report = _write_tsv(out / "segmenter_dice.tsv", ["organ", "dice"],
                        [[k, f"{v:.4f}"] for k, v in dice.items()])
    return {"segmenter.pt": path, "segmenter_dice.tsv": report}


def cmd_train_reg(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    t = cfg.train
    R, _, _ = train.train_registration(train.make_cases(t), t, out, resume=args.resume)
    epe = train.registration_endpoint_error(R, train.make_cases(t, held_out=True))
    report = _write_tsv(out / "registration_eval.tsv", ["metric", "value"],
                        [[k, f"{v:.5f}"] for k, v in epe.items()])
    return {"registration.pt": out / "registration.pt", "train_reg.log": out / "train_reg.log",
            "registration_eval.tsv": report}


def cmd_train_syn(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    t = cfg.train
    src = Path(args.source) if args.source else out
    R, _ = _load_net(src / "registration.pt", "registration", "registration checkpoint (run train-reg)")
    seg = None
    if t.w_contra > 0:
        seg, _ = _load_net(src / "segmenter.pt", "segmenter", "segmenter checkpoint (run train-seg)")
    cases = train.make_cases(t)
    held = train.make_cases(t, held_out=True)
    G, _, _ = train.train_synthesis(cases, R, seg, t, out, resume=args.resume)
    score = train.synthesis_psnr(G, R, held, cfg.eval.reference)
    report = _write_tsv(out / "synthesis_eval.tsv", ["metric", "value"], [["heldout_psnr", f"{score:.5f}"]])
    return {"synthesis.pt": out / "synthesis.pt", "train_syn.log": out / "train_syn.log",
            "synthesis_eval.tsv": report}


def cmd_eval(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    t, e = cfg.train, cfg.eval
    src = Path(args.source) if args.source else out
    G, _ = _load_net(src / "synthesis.pt", "synthesis", "synthesis checkpoint (run train-syn)")
    R = None
    if e.reference == "aligned":
        R, _ = _load_net(src / "registration.pt", "registration", "registration checkpoint (run train-reg)")
    base = t.data_seed * 100_000 + 50_000
    cases = [phantom.generate(base + i, t.size, t.magnitude, t.slip) for i in range(e.n_cases)]
    syn = train.synthesize(G, cases)
    region_rows, suv = [], {"synthetic": [], "four_tissue": []}
    diff_path = None
    for k, case in enumerate(cases):
        if R is not None:
            with torch.no_grad():
                ref = train.register(R.eval(), [case])[1][0, 0].numpy()
        else:
            ref = train.normalize(case.ct, phantom.CT_RANGE).data
        rep = evalkit.region_report(syn[k], ref, case.labels, f"case_{k:04d}")
        region_rows += [row.split("\t") for row in rep.rows()]

        spacing = case.ct.spacing
        mu_true = evalkit.hu_to_mu(case.ct)
        body = case.labels.labels > 0
        mu_syn = evalkit.synthetic_mu(syn[k], body, spacing)
        mu_seg = evalkit.four_tissue_mu(case.labels, spacing)
        rois = evalkit.roi_masks(case.labels)
        for name, mu in (("synthetic", mu_syn), ("four_tissue", mu_seg)):
            pet, pet_ref = evalkit.ac_surrogate(case.activity, mu_true, mu, e.angles)
            suv[name].append(evalkit.suv_difference(pet, pet_ref, rois, body))
            if k == 0 and name == "synthetic":
                diff_path = out / "difference_map_case_0000.vol"
                write_volume(evalkit.difference_map(pet, pet_ref, body), diff_path)
    regions = _write_tsv(out / "region_report.tsv", ["case", "region", "psnr", "ssim"], region_rows)
    suv_rows = []
    for name, per_case in suv.items():
        suv_rows += [row.split("\t") for row in evalkit.aggregate_suv(per_case).rows(name)]
    suv_path = _write_tsv(out / "suv_report.tsv", ["method", "roi", "mean", "std"], suv_rows)
    per_case_rows = [[name, f"case_{k:04d}", roi, f"{v:.6f}"]
                     for name, per_case in suv.items() for k, c in enumerate(per_case) for roi, v in c.items()]
    per_case = _write_tsv(out / "suv_per_case.tsv", ["method", "case", "roi", "difference"], per_case_rows)
    return {"region_report.tsv": regions, "suv_report.tsv": suv_path, "suv_per_case.tsv": per_case,
            "difference_map_case_0000.vol": diff_path}


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    results = gradcheck.run_gradcheck(seed=cfg.train.seed)
    path = _write_tsv(out / "gradcheck.tsv", ["check", "rel_error", "status"],
                      [r.row().split("\t") for r in results])
    for r in results:
        print(r.row())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"gradient checks failed: {','.join(failed)}")
    return {"gradcheck.tsv": path}


def cmd_mine_sanity(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    res = gradcheck.mine_sanity(seed=cfg.train.seed, hidden=cfg.train.mine_hidden)
    path = _write_tsv(out / "mine_sanity.tsv", ["metric", "value"],
                      [["estimate", f"{res.estimate:.5f}"], ["analytic", f"{res.analytic:.5f}"],
                       ["abs_error", f"{res.error:.5f}"]] +
                      [[f"trace_{i}", f"{v:.5f}"] for i, v in enumerate(res.trace)])
    print(f"mine estimate {res.estimate:.4f} analytic {res.analytic:.4f} error {res.error:.4f}")
    if res.error > 0.10:
        raise CheckFailed(f"MINE estimate {res.estimate:.4f} is {res.error:.4f} nats from {res.analytic:.4f}")
    return {"mine_sanity.tsv": path}


def _read_tsv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def cmd_report(args, cfg: RunConfig, out: Path) -> Dict[str, Path]:
    src = Path(args.source) if args.source else out
    lines = []
    found = False
    for name in ("train_reg.log", "train_syn.log"):
        path = src / name
        if not path.exists():
            continue
        found = True
        rows = _read_tsv(path)
        cols = [c for c in rows[0] if c not in ("epoch", "iter")]
        last = max(int(r["epoch"]) for r in rows)
        final = [r for r in rows if int(r["epoch"]) == last]
        lines.append(f"# {name}: final epoch {last}")
        lines += [f"{c}\t{np.mean([float(r[c]) for r in final]):.5f}" for c in cols]
        lines.append("")
    if (src / "region_report.tsv").exists():
        found = True
        rows = _read_tsv(src / "region_report.tsv")
        lines.append("# region\tPSNR mean\tPSNR std\tSSIM mean\tSSIM std")
        for region in evalkit.METRIC_REGIONS:
            sel = [r for r in rows if r["region"] == region]
            p = np.array([float(r["psnr"]) for r in sel])
            s = np.array([float(r["ssim"]) for r in sel])
            lines.append(f"{region}\t{p.mean():.3f}\t{p.std():.3f}\t{s.mean():.4f}\t{s.std():.4f}")
        lines.append("")
    if (src / "suv_report.tsv").exists():
        found = True
        rows = _read_tsv(src / "suv_report.tsv")
        lines.append("# method\troi\tmean SUV difference\tstd")
        lines += [f"{r['method']}\t{r['roi']}\t{r['mean']}\t{r['std']}" for r in rows]
        lines.append("")
    if not found:
        raise MissingArtifact(f"no training logs or evaluation tables in {src}")
    path = out / "report.txt"
    path.write_text("\n".join(lines))
    print(path.read_text(), end="")
    return {"report.txt": path}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-seg": cmd_train_seg,
    "train-reg": cmd_train_reg,
    "train-syn": cmd_train_syn,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "mine-sanity": cmd_mine_sanity,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wbsynth", description="MR-to-CT synthesis on phantoms")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides train.seed (data seed for gen-data)")
        if name == "gen-data":
            p.add_argument("--n", type=int, help="number of cases")
            p.add_argument("--size", type=int, help="grid size")
        if name in ("train-syn", "eval", "report"):
            p.add_argument("--from", dest="source", help="directory holding prerequisite artifacts")
        if name in ("train-reg", "train-syn"):
            p.add_argument("--resume", action="store_true", help="resume from the checkpoint in --out")
    return parser


def _fail(code: int, kind: str, reason: str) -> int:
    print(json.dumps({"exit": code, "kind": kind, "reason": reason.splitlines()[0]}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = Path(args.out)
    try:
        threads = _threads()
        seed = None if args.command == "gen-data" else args.seed
        cfg = load_config(args.config, args.overrides, seed)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except MissingArtifact as exc:
        return _fail(EXIT_MISSING, "missing", str(exc))
    except (train.NumericFailure, FloatingPointError, CheckFailed) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    record = {
        "command": args.command,
        "config_hash": cfg.hash(),
        "config": cfg.to_ini(),
        "seed": cfg.train.seed,
        "data_seed": cfg.train.data_seed if args.command != "gen-data" or args.seed is None else args.seed,
        "threads": threads,
        "artifacts": {k: file_hash(p) for k, p in sorted(artifacts.items()) if p is not None and p.exists()},
    }
    (out / f"run_{args.command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
