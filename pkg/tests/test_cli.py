import json

import pytest

from scribebench import __version__
from scribebench.cli import build_parser, main, resolve_config

from conftest import write_jsonl


@pytest.fixture
def env(monkeypatch, tmp_path, clinic_server):
    for var in ("SCRIBEBENCH_CONFIG", "SCRIBEBENCH_BASE_URL", "SCRIBEBENCH_CACHE_DIR", "SCRIBEBENCH_EMBEDDING_ENDPOINT"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("SCRIBEBENCH_BASE_URL", clinic_server.url)
    monkeypatch.setenv("SCRIBEBENCH_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.chdir(tmp_path)
    return clinic_server


def run_pipeline(server, n=3):
    """Drive all six commands; returns the exit codes in order."""
    codes = [main(["synthesize", "--count", str(n), "--writer-model", "writer", "--out", "synth.jsonl"])]
    for arm, model in (("base", "llama-base-1b"), ("ondevice", "ondevice-1b")):
        codes.append(main(["generate", "--dataset", "synth.jsonl", "--profile", arm, "--model", model, "--out", f"{arm}.cands.jsonl"]))
        codes.append(main([
            "evaluate", "--references", "synth.jsonl", "--candidates", f"{arm}.cands.jsonl",
            "--embedding-endpoint", server.url, "--out", f"{arm}.scores.jsonl",
        ]))
        codes.append(main([
            "judge", "--references", "synth.jsonl", "--candidates", f"{arm}.cands.jsonl",
            "--transcripts", "synth.jsonl", "--out", f"{arm}.judged.jsonl",
        ]))
        codes.append(main([
            "report", "--scores", f"{arm}.scores.jsonl", "--judged", f"{arm}.judged.jsonl",
            "--dataset-label", "Synthetic", "--out-dir", f"report_{arm}",
        ]))
    codes.append(main(["compare", "--baseline-dir", "report_base", "--treatment-dir", "report_ondevice", "--out-dir", "cmp"]))
    return codes


def test_end_to_end(env, tmp_path):
    assert run_pipeline(env) == [0] * 10
    synth = (tmp_path / "synth.jsonl").read_text().splitlines()
    assert len(synth) == 3
    scores = [json.loads(l) for l in (tmp_path / "ondevice.scores.jsonl").read_text().splitlines()]
    assert list(scores[0]) == ["id", "model", "rouge1", "rouge2", "rougeL", "rougeLsum", "bertscore", "bleurt"]
    assert scores[0]["model"] == "ondevice"
    md = (tmp_path / "report_ondevice" / "tables.md").read_text()
    assert "| Synthetic | ondevice |" in md
    assert (tmp_path / "cmp" / "comparison.md").read_text().startswith("## Synthetic: base → ondevice")
    charts = sorted(p.name for p in (tmp_path / "cmp" / "charts").iterdir())
    assert charts == ["synthetic_hallucination.svg", "synthetic_omission.svg", "synthetic_quality.svg", "synthetic_similarity.svg"]
    manifest = json.loads((tmp_path / "report_base" / "run_manifest.json").read_text())
    assert manifest["tool_version"] == __version__ and set(manifest["inputs"]) == {"scores_0", "judged_0"}
    assert (tmp_path / "base.cands.jsonl.manifest.json").exists()


def test_manifests_hold_no_secret(env, tmp_path, monkeypatch):
    monkeypatch.setenv("SCRIBEBENCH_API_KEY", "sk-should-not-leak")
    assert run_pipeline(env, n=1) == [0] * 10
    for f in tmp_path.rglob("*.json"):
        assert "sk-should-not-leak" not in f.read_text()


def test_unknown_metric_exits_1_with_usage(env, tmp_path, capsys):
    write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "note": "## Plan\nx"}])
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--references", "r.jsonl", "--candidates", "r.jsonl", "--metrics", "rouge,meteor", "--out", "s.jsonl"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_report_mismatched_ids_exit_3(env, tmp_path, capsys):
    assert run_pipeline(env, n=2) == [0] * 10
    judged = (tmp_path / "base.judged.jsonl").read_text().splitlines()
    (tmp_path / "short.jsonl").write_text(judged[0] + "\n")
    code = main(["report", "--scores", "base.scores.jsonl", "--judged", "short.jsonl", "--dataset-label", "S", "--out-dir", "r"])
    assert code == 3
    assert "synth-00001" in capsys.readouterr().err
    assert main([
        "report", "--scores", "base.scores.jsonl", "--judged", "short.jsonl", "--dataset-label", "S", "--lenient", "--out-dir", "r",
    ]) == 0


def test_missing_input_exit_3(env, capsys):
    assert main(["generate", "--dataset", "nope.jsonl", "--profile", "p", "--model", "m", "--out", "o.jsonl"]) == 3


def test_duplicate_ids_exit_3(env, tmp_path, capsys):
    write_jsonl(tmp_path / "t.jsonl", [{"id": "a", "transcript": "x"}, {"id": "a", "transcript": "y"}])
    assert main(["generate", "--dataset", "t.jsonl", "--profile", "p", "--model", "m", "--out", "o.jsonl"]) == 3
    assert "duplicate id" in capsys.readouterr().err


def test_unreachable_endpoint_exit_2(env, tmp_path, monkeypatch):
    monkeypatch.setenv("SCRIBEBENCH_BASE_URL", "http://127.0.0.1:9")
    write_jsonl(tmp_path / "t.jsonl", [{"id": "a", "transcript": "Doctor: hi\nPatient: hello"}])
    assert main(["generate", "--dataset", "t.jsonl", "--profile", "p", "--model", "m", "--out", "o.jsonl"]) == 2


@pytest.mark.parametrize("flag", ["--api-key", "--token=abc"])
def test_secret_flags_rejected(flag, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", flag, "x", "--dataset", "d", "--profile", "p", "--out", "o"])
    assert exc.value.code == 1
    assert "environment" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == f"scribebench {__version__} (format 1)"


def test_flags_override_env_override_config(env, tmp_path, monkeypatch):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"client": {"base_url": "http://from-config", "max_concurrency": 2}}))
    monkeypatch.setenv("SCRIBEBENCH_CONFIG", str(cfg_file))
    monkeypatch.delenv("SCRIBEBENCH_BASE_URL")
    args = build_parser().parse_args(["cache", "clear"])
    assert resolve_config(args).client.base_url == "http://from-config"
    monkeypatch.setenv("SCRIBEBENCH_BASE_URL", "http://from-env")
    assert resolve_config(args).client.base_url == "http://from-env"
    args = build_parser().parse_args(["cache", "clear", "--base-url", "http://from-flag"])
    cfg = resolve_config(args)
    assert cfg.client.base_url == "http://from-flag" and cfg.client.max_concurrency == 2


def test_cache_clear(env, tmp_path, capsys):
    write_jsonl(tmp_path / "t.jsonl", [{"id": "a", "transcript": "Doctor: hi\nPatient: hello"}])
    assert main(["generate", "--dataset", "t.jsonl", "--profile", "p", "--model", "m", "--out", "o.jsonl"]) == 0
    capsys.readouterr()
    assert main(["cache", "clear"]) == 0
    assert "removed 1 cached" in capsys.readouterr().out


def test_profile_from_config_file(env, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"profiles": {"ondevice": {"model": "ondevice-1b", "max_tokens": 900}}}))
    write_jsonl(tmp_path / "t.jsonl", [{"id": "a", "transcript": "Doctor: hi\nPatient: hello"}])
    assert main(["generate", "--config", "cfg.json", "--dataset", "t.jsonl", "--profile", "ondevice", "--out", "o.jsonl"]) == 0
    assert env.requests[-1].payload["max_tokens"] == 900
    with pytest.raises(SystemExit):
        main(["generate", "--config", "cfg.json", "--dataset", "t.jsonl", "--profile", "missing", "--out", "o.jsonl"])
