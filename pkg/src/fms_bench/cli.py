"""Console entry point: run-suite, run-case, and run-mas subcommands."""

from __future__ import annotations

import argparse
import sys

from .controllers import ControllerBinding
from .paradigms import authority_mode_ids
from .runner import RunRequest, parse_case_id, resolve_suite, run_case, run_suite


def _parse_seeds(text: str) -> tuple[int, ...]:
    """"10" means seeds 0..9; "0,3,7" means exactly those."""
    text = text.strip()
    if "," in text:
        return tuple(int(part) for part in text.split(",") if part.strip())
    return tuple(range(int(text)))


def _parse_modes(text: str) -> tuple[str, ...]:
    if text == "all":
        return tuple(authority_mode_ids())
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _sanitize(label: str) -> str:
    return label.replace("/", "-").replace(":", "-").replace(" ", "-")


def _binding_from_args(args: argparse.Namespace, fallback_label: str | None = None) -> ControllerBinding:
    if getattr(args, "controller_command", None):
        return ControllerBinding(
            kind="external_process",
            name=args.controller_name or "external",
            command=args.controller_command,
            timeout=args.timeout,
            retries=args.retries,
        )
    if getattr(args, "llm_model", None):
        if args.llm_backend != "openai_compat":
            raise SystemExit(f"unsupported llm backend {args.llm_backend!r}; known: openai_compat")
        return ControllerBinding(
            kind="model_service",
            name=args.controller_name or _sanitize(args.llm_model),
            base_url=args.llm_base_url,
            model=args.llm_model,
            timeout=args.timeout,
            retries=args.retries,
        )
    controller = getattr(args, "controller", None) or fallback_label or "rule_greedy"
    if controller == "rule_greedy":
        return ControllerBinding(kind="rule_greedy", name=args.controller_name or "rule_greedy")
    if controller in ("rule_random", "rule_random_seeded"):
        return ControllerBinding(
            kind="rule_random_seeded",
            name=args.controller_name or controller,
            seed=args.controller_seed,
        )
    raise SystemExit(f"unknown controller {controller!r}")


def _add_controller_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--controller", default=None, help="rule_greedy or rule_random_seeded")
    parser.add_argument("--controller-command", default=None, help="external process command line")
    parser.add_argument("--controller-name", default=None, help="label used in case ids")
    parser.add_argument("--controller-seed", type=int, default=0, help="extra seed for rule_random_seeded")
    parser.add_argument("--llm-backend", default="openai_compat")
    parser.add_argument("--llm-model", default=None)
    parser.add_argument("--llm-base-url", default="http://localhost:8000/v1")
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("--retries", type=int, default=2)
    parser.add_argument("--framework", default="none", help="metadata label only")
    parser.add_argument("--output-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fms-bench")
    sub = parser.add_subparsers(dest="command", required=True)

    suite = sub.add_parser("run-suite", help="run instances x modes x seeds and aggregate")
    suite.add_argument("--suite", required=True, help="instance ids, source ids, or aliases (comma separated)")
    suite.add_argument("--authority-mode", required=True, help="mode id, comma list, or 'all'")
    suite.add_argument("--seeds", default="10")
    suite.add_argument("--jobs", type=int, default=1)
    _add_controller_args(suite)

    mas = sub.add_parser("run-mas", help="run-suite wired to an external agent process")
    mas.add_argument("--suite", required=True)
    mas.add_argument("--authority-mode", required=True)
    mas.add_argument("--seeds", default="10")
    mas.add_argument("--jobs", type=int, default=1)
    _add_controller_args(mas)

    case = sub.add_parser("run-case", help="run or re-run a single case id")
    case.add_argument("--case-id", required=True)
    _add_controller_args(case)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("run-suite", "run-mas"):
        if args.command == "run-mas" and not args.controller_command:
            raise SystemExit("run-mas needs --controller-command")
        binding = _binding_from_args(args)
        request = RunRequest(
            instances=tuple(resolve_suite(args.suite)),
            mode_ids=_parse_modes(args.authority_mode),
            binding=binding,
            seeds=_parse_seeds(args.seeds),
            output_dir=args.output_dir,
            framework=args.framework,
            jobs=args.jobs,
        )
        records = run_suite(request)
        ok = sum(1 for r in records if r.status == "done")
        print(f"{len(records)} cases -> {args.output_dir} ({ok} done, {len(records) - ok} not done)")
        return 0
    _, _, controller_label, _ = parse_case_id(args.case_id)
    binding = _binding_from_args(args, fallback_label=controller_label)
    request = RunRequest(
        instances=(),
        mode_ids=(),
        binding=binding,
        seeds=(),
        output_dir=args.output_dir,
        framework=args.framework,
    )
    record = run_case(request, args.case_id)
    print(f"{record.case_id}: status={record.status} makespan={record.mk} decisions={record.ds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
