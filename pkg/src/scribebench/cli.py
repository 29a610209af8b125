"""``scribebench`` command line: synthesize, generate, evaluate, judge, report, compare.

Exit codes: 1 usage, 2 runtime (transport, model failures), 3 input validation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from . import FORMAT_VERSION, __version__
from ._io import atomic_write_text, canonical_hash, iter_jsonl, sha256_file, write_jsonl
from .embed_metrics import EmbeddingBackendRef, EmbeddingError, bertscore, build_idf, ingest_external_scores, make_backend
from .generator import GenerationProfile, generate_batch
from .judge import JudgeConfig, JudgeRecord, judge_batch
from .llm_client import JUDGE_TEMPERATURE, ChatClient, ClientConfig, LLMError, ResponseCache
from .notes import DEFAULT_SCHEMA, DatasetError, SectionSchema, load_dataset
from .prompts import TemplateError, load_template
from .report import (
    ReportError,
    aggregate,
    chart_groups_for,
    compare,
    load_aggregates,
    pair_for_comparison,
    render_chart,
    render_comparison_markdown,
    render_tables,
)
from .rouge import RougeConfig, rouge_suite
from .synthesis import StageProfile, SynthesisConfig, SynthesisError, run_pipeline

logger = logging.getLogger("scribebench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2, 3
CONFIG_ENV = "SCRIBEBENCH_CONFIG"
KNOWN_METRICS = ("rouge", "bertscore")
_SECRET_FLAGS = ("--api-key", "--apikey", "--key", "--token", "--secret", "--password")


class InputError(Exception):
    """Raised for invalid inputs; maps to exit code 3."""


class RuntimeFailure(Exception):
    """Raised for transport or model failures; maps to exit code 2."""


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    """Fully resolved configuration: flags > environment > config file > defaults."""

    client: ClientConfig = field(default_factory=ClientConfig)
    schema_path: Optional[str] = None
    profiles: dict[str, dict] = field(default_factory=dict)
    judge: dict[str, Any] = field(default_factory=dict)
    synthesis: dict[str, Any] = field(default_factory=dict)
    embedding: dict[str, Any] = field(default_factory=dict)

    def schema(self) -> SectionSchema:
        return SectionSchema.load(self.schema_path) if self.schema_path else DEFAULT_SCHEMA

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _env(name: str) -> Optional[str]:
    value = os.environ.get(name)
    return value if value else None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    path = args.config or _env(CONFIG_ENV)
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError(f"config {path} must hold a single JSON object")

    client = dict(raw.get("client", {}))
    for key, env, flag in (
        ("base_url", "SCRIBEBENCH_BASE_URL", args.base_url),
        ("cache_dir", "SCRIBEBENCH_CACHE_DIR", args.cache_dir),
        ("api_key_env_name", "SCRIBEBENCH_API_KEY_ENV", None),
        ("max_concurrency", "SCRIBEBENCH_MAX_CONCURRENCY", args.max_concurrency),
        ("requests_per_minute", "SCRIBEBENCH_RPM", args.rpm),
    ):
        value = flag if flag is not None else _env(env)
        if value is not None:
            client[key] = value
    for key in ("max_concurrency", "requests_per_minute", "max_retries"):
        if client.get(key) is not None:
            client[key] = int(client[key])
    try:
        client_cfg = ClientConfig(**client)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid client config: {exc}") from None

    embedding = dict(raw.get("embedding", {}))
    if _env("SCRIBEBENCH_EMBEDDING_ENDPOINT"):
        embedding["endpoint"] = _env("SCRIBEBENCH_EMBEDDING_ENDPOINT")
    judge = dict(raw.get("judge", {}))
    if _env("SCRIBEBENCH_JUDGE_MODEL"):
        judge["judge_model"] = _env("SCRIBEBENCH_JUDGE_MODEL")
    schema = args.schema or _env("SCRIBEBENCH_SCHEMA") or raw.get("schema")
    return RunConfig(client_cfg, schema, dict(raw.get("profiles", {})), judge, dict(raw.get("synthesis", {})), embedding)


def write_manifest(path: Path, command: str, cfg: RunConfig, inputs: dict[str, Optional[str]], extra: Optional[dict] = None) -> None:
    manifest = {
        "tool": "scribebench",
        "tool_version": __version__,
        "format_version": FORMAT_VERSION,
        "command": command,
        "config_hash": canonical_hash(cfg.to_json()),
        "config": cfg.to_json(),
        "inputs": {k: (sha256_file(v) if v else None) for k, v in sorted(inputs.items())},
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sidecar(out: str) -> Path:
    return Path(out).with_name(Path(out).name + ".manifest.json")


def _load(path: str, kind: str, schema: SectionSchema):
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    try:
        return load_dataset(path, kind, schema)
    except DatasetError as exc:
        raise InputError(str(exc)) from None


def _rows(path: str) -> list[dict]:
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    try:
        return [obj for _, obj in iter_jsonl(path)]
    except ValueError as exc:
        raise InputError(str(exc)) from None


# --- commands ---------------------------------------------------------------


def cmd_synthesize(args, cfg: RunConfig, client: ChatClient) -> int:
    s = cfg.synthesis
    writer_model = args.writer_model or s.get("writer_model")
    if not writer_model:
        args._parser.error("a writer model is required (--writer-model or synthesis.writer_model in the config)")
    critic_model = args.critic_model or s.get("critic_model") or writer_model
    checkpoint_dir = args.checkpoint_dir or s.get("checkpoint_dir") or f"{args.out}.ckpt"
    try:
        config = SynthesisConfig(
            count=args.count,
            writer=StageProfile(writer_model, **s.get("writer", {})),
            critic=StageProfile(critic_model, **{"temperature": JUDGE_TEMPERATURE, **s.get("critic", {})}),
            checkpoint_dir=checkpoint_dir,
            specialty=args.specialty or s.get("specialty", "endocrinology"),
            max_revision_iters=args.max_revisions if args.max_revisions is not None else s.get("max_revision_iters", 3),
            pass_threshold=args.pass_threshold if args.pass_threshold is not None else s.get("pass_threshold", 4),
            topic_batch_size=s.get("topic_batch_size", 25),
            template_dir=args.template_dir or s.get("template_dir"),
            pilot=args.pilot,
        )
    except (TypeError, ValueError) as exc:
        args._parser.error(str(exc))
    try:
        result = run_pipeline(config, client, args.out, cfg.schema())
    except (SynthesisError, LLMError) as exc:
        raise RuntimeFailure(str(exc)) from None
    if result.failures:
        for rid, err in result.failures.items():
            print(f"failed: {rid}: {err}", file=sys.stderr)
        raise RuntimeFailure(f"{len(result.failures)} record(s) failed; rerun to resume from checkpoints")
    write_manifest(_sidecar(args.out), "synthesize", cfg, {}, {"synthesis_config_hash": config.config_hash})
    flagged = sum(not r["critique_passed"] for r in result.records)
    if result.pilot:
        print(f"pilot complete: {len(result.records)} records in {args.out}; review them before running without --pilot")
    else:
        print(f"wrote {len(result.records)} records to {args.out} ({flagged} flagged critique_passed=false)")
    return EXIT_OK


def _profile(args, cfg: RunConfig) -> GenerationProfile:
    spec = dict(cfg.profiles.get(args.profile, {}))
    if args.model:
        spec["model"] = args.model
    if "model" not in spec:
        args._parser.error(f"profile {args.profile!r} is not in the config; pass --model to define it")
    if args.template:
        spec["prompt_template_id"] = args.template
    spec.pop("client", None)
    try:
        return GenerationProfile(profile_id=args.profile, client=cfg.client, **spec)
    except TypeError as exc:
        args._parser.error(f"bad profile {args.profile!r}: {exc}")


def cmd_generate(args, cfg: RunConfig, client: ChatClient) -> int:
    schema = cfg.schema()
    profile = _profile(args, cfg)
    try:
        template = load_template(profile.prompt_template_id)
    except TemplateError as exc:
        raise InputError(str(exc)) from None
    dataset = _load(args.dataset, "transcripts", schema)
    result = generate_batch(dataset, profile, client, args.out, template, schema)
    write_manifest(_sidecar(args.out), "generate", cfg, {"dataset": args.dataset}, {"gen_config_hash": profile.config_hash})
    if result.failures:
        print("failed ids: " + ", ".join(result.failures), file=sys.stderr)
        raise RuntimeFailure(f"{len(result.failures)} record(s) failed permanently")
    print(f"wrote {len(result.records)} candidates to {args.out}")
    return EXIT_OK


def _index_references(path: str, schema: SectionSchema) -> dict:
    return {r.id: r for r in _load(path, "references", schema)}


def cmd_evaluate(args, cfg: RunConfig, client: Optional[ChatClient]) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in KNOWN_METRICS]
    if unknown or not metrics:
        args._parser.error(f"unknown metric(s) {unknown}; choose from {', '.join(KNOWN_METRICS)}")
    schema = cfg.schema()
    refs = _index_references(args.references, schema)
    cands = _load(args.candidates, "candidates", schema)
    orphans = [c.id for c in cands if c.id not in refs]
    if orphans:
        raise InputError("candidates without a reference: " + ", ".join(orphans))

    backend = idf = None
    if "bertscore" in metrics:
        endpoint = args.embedding_endpoint or cfg.embedding.get("endpoint")
        kind = args.embedding_backend or ("http_service" if endpoint else None)
        if kind is None:
            args._parser.error("bertscore needs --embedding-endpoint (or --embedding-backend mock_one_hot)")
        model = args.embedding_model or cfg.embedding.get("model", "default")
        try:
            ref = EmbeddingBackendRef(kind, model if kind == "http_service" else "one-hot", endpoint)
        except ValueError as exc:
            args._parser.error(str(exc))
        backend = make_backend(ref, cache_dir=cfg.client.cache_dir, max_concurrency=cfg.client.max_concurrency) if kind == "http_service" else make_backend(ref)
        if args.idf:
            idf = build_idf([r.reference_note.raw for r in refs.values()])

    external = {}
    if args.external_scores:
        try:
            external = ingest_external_scores(args.external_scores, args.external_metric)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None

    rcfg = RougeConfig(use_stemmer=args.stemmer)
    rows = []
    try:
        for c in cands:
            ref_text = refs[c.id].reference_note.raw
            row: dict = {"id": c.id, "model": c.model}
            if "rouge" in metrics:
                row.update({k: v.to_json() for k, v in rouge_suite(c.note.raw, ref_text, rcfg).items()})
            else:
                row.update({k: None for k in ("rouge1", "rouge2", "rougeL", "rougeLsum")})
            row["bertscore"] = bertscore(c.note.raw, ref_text, backend, idf).to_json() if backend else None
            row["bleurt"] = external.get(c.id)
            rows.append(row)
    except EmbeddingError as exc:
        raise RuntimeFailure(str(exc)) from None
    write_jsonl(args.out, rows)
    write_manifest(
        _sidecar(args.out),
        "evaluate",
        cfg,
        {"references": args.references, "candidates": args.candidates, "external_scores": args.external_scores},
        {"metrics": metrics, "stemmer": args.stemmer, "idf": args.idf},
    )
    print(f"wrote {len(rows)} score rows to {args.out}")
    return EXIT_OK


def cmd_judge(args, cfg: RunConfig, client: ChatClient) -> int:
    schema = cfg.schema()
    refs = _index_references(args.references, schema)
    cands = _load(args.candidates, "candidates", schema)
    transcripts = {}
    if args.transcripts:
        transcripts = {t.id: t.transcript for t in _load(args.transcripts, "transcripts", schema)}
    orphans = [c.id for c in cands if c.id not in refs]
    if orphans:
        raise InputError("candidates without a reference: " + ", ".join(orphans))

    jcfg = dict(cfg.judge)
    if args.judge_model:
        jcfg["judge_model"] = args.judge_model
    if args.no_transcript:
        jcfg["include_transcript"] = False
    try:
        config = JudgeConfig(client=cfg.client, **jcfg)
    except TypeError as exc:
        raise InputError(f"invalid judge config: {exc}") from None

    records = []
    for c in cands:
        ref = refs[c.id]
        transcript = transcripts.get(c.id) or (ref.transcript.transcript if ref.transcript else None)
        records.append(JudgeRecord(c.id, c.model, ref.reference_note.raw, c.note.raw, transcript))
    result = judge_batch(records, config, client, args.out)
    write_manifest(
        _sidecar(args.out),
        "judge",
        cfg,
        {"references": args.references, "candidates": args.candidates, "transcripts": args.transcripts},
        {"judge_model": config.judge_model, "failed_ids": sorted(result.failures)},
    )
    if result.failures:
        for rid, err in result.failures.items():
            print(f"failed: {rid}: {err}", file=sys.stderr)
        raise RuntimeFailure(f"{len(result.failures)} record(s) could not be judged")
    print(f"wrote {len(result.records)} assessments to {args.out}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig, client=None) -> int:
    scores = args.scores or []
    judged = args.judged or []
    labels = args.dataset_label or []
    n_arms = max(len(scores), len(judged))
    if n_arms == 0:
        args._parser.error("give at least one --scores or --judged file")
    for name, given in (("--scores", scores), ("--judged", judged)):
        if given and len(given) != n_arms:
            args._parser.error(f"{name} must be repeated once per arm ({n_arms})")
    if len(labels) != n_arms:
        args._parser.error(f"--dataset-label must be given once per arm ({n_arms})")
    models = args.model_label or [None] * n_arms
    if len(models) != n_arms:
        args._parser.error(f"--model-label must be given once per arm ({n_arms}) or not at all")

    rows, inputs = [], {}
    for i in range(n_arms):
        s_rows = _rows(scores[i]) if scores else []
        j_rows = _rows(judged[i]) if judged else []
        try:
            rows.append(aggregate(s_rows, j_rows, labels[i], models[i], strict=not args.lenient))
        except ReportError as exc:
            raise InputError(str(exc)) from None
        except (KeyError, ValueError) as exc:
            raise InputError(f"arm {i + 1}: malformed rows ({exc})") from None
        if scores:
            inputs[f"scores_{i}"] = scores[i]
        if judged:
            inputs[f"judged_{i}"] = judged[i]
    out = Path(args.out_dir)
    render_tables(rows, out)
    write_manifest(out / "run_manifest.json", "report", cfg, inputs)
    print(f"wrote report for {len(rows)} arm(s) to {out}")
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig, client=None) -> int:
    try:
        pairs = pair_for_comparison(load_aggregates(args.baseline_dir), load_aggregates(args.treatment_dir))
        reports = [compare(b, t) for b, t in pairs]
    except ReportError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out_dir)
    atomic_write_text(out / "comparison.md", render_comparison_markdown(reports))
    charts = []
    for rep in reports:
        slug = "".join(ch if ch.isalnum() else "_" for ch in rep.dataset).strip("_").lower() or "dataset"
        for group in chart_groups_for(rep):
            path = out / "charts" / f"{slug}_{group}.svg"
            atomic_write_text(path, render_chart(rep, group))
            charts.append(str(path.relative_to(out)))
    write_manifest(
        out / "run_manifest.json",
        "compare",
        cfg,
        {"baseline": str(Path(args.baseline_dir) / "tables.jsonl"), "treatment": str(Path(args.treatment_dir) / "tables.jsonl")},
        {"charts": charts},
    )
    print(f"wrote comparison for {len(reports)} dataset(s) and {len(charts)} chart(s) to {out}")
    return EXIT_OK


def cmd_cache_clear(args, cfg: RunConfig, client=None) -> int:
    if not cfg.client.cache_dir:
        args._parser.error("no cache directory configured (--cache-dir or SCRIBEBENCH_CACHE_DIR)")
    n = ResponseCache(cfg.client.cache_dir).clear()
    print(f"removed {n} cached responses from {cfg.client.cache_dir}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> UsageParser:
    common = UsageParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (or ${CONFIG_ENV})")
    common.add_argument("--base-url", help="chat-completions endpoint base URL")
    common.add_argument("--cache-dir", help="response cache directory")
    common.add_argument("--schema", help="section schema JSON file")
    common.add_argument("--max-concurrency", type=int)
    common.add_argument("--rpm", type=int, help="requests-per-minute cap")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = UsageParser(prog="scribebench", description="Benchmark transcript-to-structured-note generation.")
    p.add_argument("--version", action="version", version=f"scribebench {__version__} (format {FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(_fn=fn, _parser=sp)
        return sp

    sp = add("synthesize", cmd_synthesize, "run the synthetic data workflow")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--specialty")
    sp.add_argument("--pilot", type=int, help="process only the first N records, then stop for review")
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--writer-model")
    sp.add_argument("--critic-model")
    sp.add_argument("--max-revisions", type=int)
    sp.add_argument("--pass-threshold", type=int)
    sp.add_argument("--template-dir")

    sp = add("generate", cmd_generate, "generate candidate notes with one profile")
    sp.add_argument("--dataset", required=True, help="transcripts file")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", help="model name (overrides the profile)")
    sp.add_argument("--template", help="prompt template id or .txt path")

    sp = add("evaluate", cmd_evaluate, "score candidates against references")
    sp.add_argument("--references", required=True)
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--metrics", default="rouge,bertscore")
    sp.add_argument("--embedding-endpoint")
    sp.add_argument("--embedding-model")
    sp.add_argument("--embedding-backend", choices=("http_service", "mock_one_hot"))
    sp.add_argument("--idf", action="store_true", help="IDF-weight BERTScore using the references")
    sp.add_argument("--stemmer", action="store_true", help="Porter-stem ROUGE tokens")
    sp.add_argument("--external-scores", help="line-delimited externally computed scores")
    sp.add_argument("--external-metric", default="bleurt")
    sp.add_argument("--out", required=True)

    sp = add("judge", cmd_judge, "LLM-as-judge assessment of candidates")
    sp.add_argument("--references", required=True)
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--transcripts")
    sp.add_argument("--judge-model")
    sp.add_argument("--no-transcript", action="store_true", help="ground the judge in the reference only")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "aggregate scores and assessments into tables")
    sp.add_argument("--scores", action="append")
    sp.add_argument("--judged", action="append")
    sp.add_argument("--dataset-label", action="append")
    sp.add_argument("--model-label", action="append")
    sp.add_argument("--lenient", action="store_true", help="aggregate over shared ids instead of failing")
    sp.add_argument("--out-dir", required=True)

    sp = add("compare", cmd_compare, "baseline vs treatment comparison and charts")
    sp.add_argument("--baseline-dir", required=True)
    sp.add_argument("--treatment-dir", required=True)
    sp.add_argument("--out-dir", required=True)

    cache = sub.add_parser("cache", help="response cache maintenance")
    csub = cache.add_subparsers(dest="cache_command", required=True)
    sp = csub.add_parser("clear", parents=[common], help="delete all cached chat responses")
    sp.set_defaults(_fn=cmd_cache_clear, _parser=sp)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    for a in argv:
        if a.split("=", 1)[0] in _SECRET_FLAGS:
            parser.error(f"{a.split('=', 1)[0]} is not accepted: supply secrets through environment variables")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    client = None
    try:
        cfg = resolve_config(args)
        if args._fn in (cmd_synthesize, cmd_generate, cmd_judge):
            client = ChatClient(cfg.client)
        return args._fn(args, cfg, client)
    except InputError as exc:
        print(f"scribebench: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeFailure, LLMError) as exc:
        print(f"scribebench: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if client is not None:
            client.close()


if __name__ == "__main__":
    sys.exit(main())
