"""``avssl`` command line: pretraining, feature extraction, evaluation and the ablation
sweeps, all driven by one JSON config with flag overrides."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .errors import AvsslError, ConfigError, MissingModality

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _json_value(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=json, got {text!r}")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avssl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--workdir", help=f"work directory (default ${ex.WORKDIR_ENV} or "
                                          "./avssl-work)")
    common.add_argument("--out", help="report path stem (default <workdir>/reports/...)")
    common.add_argument("-v", "--verbose", action="store_true")
    g = common.add_argument_group("config overrides")
    g.add_argument("--pretext", choices=ex.PRETEXTS)
    g.add_argument("--alpha", type=float)
    g.add_argument("--preset", choices=sorted(ex.SCHEDULE_DEFAULTS))
    g.add_argument("--task", choices=("classify", "regress"))
    g.add_argument("--mode", choices=("frozen", "finetune", "scratch"))
    g.add_argument("--n-runs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--label-fraction", type=float)
    g.add_argument("--pretrain-fraction", type=float)
    g.add_argument("--pretrain-manifest", help="pretraining corpus manifest (JSON lines)")
    g.add_argument("--downstream-manifest", help="downstream corpus manifest (JSON lines)")
    g.add_argument("--baselines", type=_names, help="comma-separated methods")
    g.add_argument("--alpha-grid", type=_floats)
    g.add_argument("--snr-list", type=_floats)
    g.add_argument("--fraction-list", type=_floats)
    g.add_argument("--set", action="append", type=_json_value, default=[], metavar="KEY=JSON",
                   help="override any config field, e.g. --set n_runs=3")

    for name, text in (("pretrain", "pretrain the pretext model (cached by config)"),
                       ("extract", "write encoder features to a feature store"),
                       ("eval", "downstream evaluation against baselines"),
                       ("ablate-alpha", "sweep the multi-task weight"),
                       ("ablate-noise", "sweep babble-noise SNR"),
                       ("ablate-size", "sweep the pretraining-set fraction")):
        sub.add_parser(name, parents=[common], help=text)
    sd = sub.add_parser("synth-data", parents=[common], help="write a synthetic corpus to disk")
    sd.add_argument("--which", choices=("pretrain", "downstream"), default="downstream")
    sd.add_argument("--dest", help="output directory for WAVs, videos and the manifest")
    rp = sub.add_parser("report", help="summarise report JSON files")
    rp.add_argument("reports", nargs="+", help="report .json files or directories of them")
    return p


def overrides_from(args) -> dict:
    out = {
        "pretext": args.pretext, "alpha": args.alpha, "preset": args.preset,
        "task": args.task, "mode": args.mode, "n_runs": args.n_runs, "seed": args.seed,
        "label_fraction": args.label_fraction, "pretrain_fraction": args.pretrain_fraction,
        "baselines": args.baselines, "alpha_grid": args.alpha_grid,
        "snr_list": args.snr_list, "fraction_list": args.fraction_list,
    }
    if args.pretrain_manifest:
        out["pretrain_data"] = {"manifest": args.pretrain_manifest}
    if args.downstream_manifest:
        out["downstream_data"] = {"manifest": args.downstream_manifest}
    out.update(dict(args.set))
    return out


def summarise(paths) -> str:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    lines = []
    for f in files:
        try:
            rep = json.loads(f.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("reports", f"cannot read {f}: {e}") from None
        if not isinstance(rep, dict) or "command" not in rep:
            continue
        lines.append(f"== {f.name} ({rep['command']}, code {rep.get('code_hash', '?')[:12]})")
        for row in rep.get("table") or []:
            lines.append("  " + "  ".join(f"{k}={_short(v)}" for k, v in row.items()
                                          if k != "values"))
        if rep.get("pretraining", {}).get("odd_accuracy_heldout") is not None:
            lines.append(f"  odd accuracy (held out) = "
                         f"{rep['pretraining']['odd_accuracy_heldout']:.3f}")
    return "\n".join(lines)


def _short(v):
    return f"{v:.4f}" if isinstance(v, float) else v


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else
                        logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            print(summarise(args.reports))
        except ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    try:
        file_values = ex.load_config_file(args.config) if args.config else {}
        cfg = ex.build_config(file_values, overrides_from(args))
        ex.validate(cfg, args.command)
    except (ConfigError, MissingModality) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        ws = ex.Workspace(args.workdir)
        if args.command == "synth-data":
            report = ex.cmd_synth_data(cfg, ws, args.which, args.dest)
        else:
            report = ex.run_command(args.command, cfg, ws)
        stem = (Path(args.out) if args.out else
                ws.path("reports", f"{args.command}-{ex.content_key(cfg.to_dict())}"))
        for path in ex.write_report(report, stem):
            print(path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AvsslError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
