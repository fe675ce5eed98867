import json
import logging
from pathlib import Path

import pytest

from phrasenet import cli, decoder
from phrasenet.corpus import make_example, read_lines
from phrasenet.phrase_memory import load_table
from phrasenet.search import decode_beam
from phrasenet.trainer import load_checkpoint

DATA = Path(__file__).parent / "data"


def run(*argv):
    return cli.main([str(a) for a in argv])


# --------------------------------------------------------------- preprocess


def test_preprocess_matches_the_golden_dump(tmp_path, capsys):
    out = tmp_path / "ann.jsonl"
    rc = run("preprocess", "--source", DATA / "pre.src", "--target", DATA / "pre.tgt",
             "--table", DATA / "pre.tsv", "--out", out, "--n-p", 4)
    assert rc == 0
    assert out.read_text() == (DATA / "preprocess_golden.jsonl").read_text()
    assert "sentences\t4" in capsys.readouterr().out


def test_preprocess_with_an_empty_table(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    out = tmp_path / "ann.jsonl"
    assert run("preprocess", "--source", DATA / "pre.src", "--table", empty, "--out", out) == 0
    for line in out.read_text().splitlines():
        rec = json.loads(line)
        assert rec["occurrences"] == [] and rec["gold"] == []


def test_preprocess_bad_path(tmp_path):
    assert run("preprocess", "--source", tmp_path / "nope.src", "--out", tmp_path / "o") == 2
    assert run("preprocess", "--out", tmp_path / "o") == 2


# -------------------------------------------------------------------- synth


SMALL = ["--vocab-size", 40, "--n-rules", 8, "--n-pairs", 120, "--n-dev", 10, "--n-test", 12, "--seed", 4]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", d, *SMALL) == 0
    return d


def test_synth_is_deterministic(corpus, tmp_path):
    assert run("synth", "--out", tmp_path, *SMALL) == 0
    for f in sorted(p.name for p in corpus.iterdir()):
        assert (tmp_path / f).read_bytes() == (corpus / f).read_bytes(), f


def test_synth_split_sizes(corpus):
    for split, n in [("train", 120), ("dev", 10), ("test", 12)]:
        assert len(read_lines(corpus / f"{split}.src")) == n
        assert len(read_lines(corpus / f"{split}.tgt")) == n
        assert len((corpus / f"{split}.meta.jsonl").read_text().splitlines()) == n


def test_synth_table_loads_cleanly(corpus, caplog):
    with caplog.at_level(logging.WARNING):
        table = load_table(corpus / "phrases.tsv")
    assert len(table) == 8
    assert not caplog.records


def test_synth_rejects_bad_settings(tmp_path):
    assert run("synth", "--out", tmp_path, "--oov-fraction", 1.5) == 2


# -------------------------------------------------------------------- train


def train_args(corpus, ckpt, *extra):
    return ["train", "--train-src", corpus / "train.src", "--train-tgt", corpus / "train.tgt",
            "--table", corpus / "phrases.tsv", "--tgt-vocab", corpus / "vocab.tgt",
            "--checkpoint", ckpt, "--d-e", 8, "--d-h", 12, "--n-p", 4, "--batch-size", 8, "-q", *extra]


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    rc = run(*train_args(corpus, d / "m.pnmt", "--steps", 200, "--metrics", d / "m.csv", "--lr", 3e-3))
    assert rc == 0
    return d


def test_train_smoke(trained):
    rows = (trained / "m.csv").read_text().splitlines()
    assert rows[0] == "step,loss,perplexity,gate_rate"
    assert len(rows) == 201
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert sum(losses[-20:]) < sum(losses[:20])
    assert load_checkpoint(trained / "m.pnmt").header["step"] == 200


def test_resume_continues_the_step_count(corpus, trained, tmp_path):
    out = tmp_path / "r.pnmt"
    assert run(*train_args(corpus, out, "--resume", trained / "m.pnmt", "--steps", 210)) == 0
    assert load_checkpoint(out).header["step"] == 210


def test_grad_check_aborts_training(corpus, tmp_path, monkeypatch):
    original = decoder.gate_logit
    monkeypatch.setattr(decoder, "gate_logit", lambda p, s, c, e: original(p, s, c, e) + _skew(p))
    ckpt = tmp_path / "m.pnmt"
    assert run(*train_args(corpus, ckpt, "--steps", 5, "--grad-check")) == 1
    assert not ckpt.exists()


def _skew(params):
    # a forward-only perturbation: the value depends on gate.b but no gradient flows back
    from phrasenet.autodiff import Tensor

    return Tensor(3.0 * params["gate.b"].data[0])


def test_train_usage_errors(corpus, tmp_path):
    assert run(*train_args(corpus, tmp_path / "m.pnmt")) == 2  # neither --epochs nor --steps
    assert run("train", "--checkpoint", tmp_path / "m.pnmt", "--steps", 1) == 2


# ---------------------------------------------------------------- translate


def test_translate_beam_one_equals_greedy(corpus, trained, tmp_path):
    out = tmp_path / "hyp.txt"
    assert run("translate", "--checkpoint", trained / "m.pnmt", "--table", corpus / "phrases.tsv",
               "--input", corpus / "test.src", "--output", out, "--beam", 1, "-q") == 0
    ck = load_checkpoint(trained / "m.pnmt")
    sv, tv = ck.vocabs
    table = load_table(corpus / "phrases.tsv")
    for line, got in zip(read_lines(corpus / "test.src"), read_lines(out)):
        ex = make_example(line, None, sv, tv, table, ck.model.config.n_p)
        assert decode_beam(ck.model, ex, tv, beam=1, max_len=100).tokens == got


def test_translate_trace(corpus, trained, tmp_path):
    trace = tmp_path / "trace.txt"
    assert run("translate", "--checkpoint", trained / "m.pnmt", "--table", corpus / "phrases.tsv",
               "--input", corpus / "dev.src", "--output", tmp_path / "o.txt", "--beam", 3,
               "--trace", trace, "--attention", tmp_path / "att.jsonl", "-q") == 0
    lines = trace.read_text().splitlines()
    assert lines[0] == "# sentence 0"
    assert any(line.startswith("t=0\tmode=") for line in lines)
    recs = [json.loads(x) for x in (tmp_path / "att.jsonl").read_text().splitlines()]
    assert len(recs) == 10 and len(recs[0]["alpha"]) == len(recs[0]["output"])


def test_translate_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.pnmt"
    bad.write_bytes(b"junk")
    src = tmp_path / "in.txt"
    src.write_text("a b\n")
    assert run("translate", "--checkpoint", bad, "--input", src) == 1
    assert run("translate", "--checkpoint", tmp_path / "missing", "--input", src) == 2


# --------------------------------------------------------------------- eval


def test_eval_identical_files(corpus, capsys):
    ref = corpus / "test.tgt"
    assert run("eval", "--candidates", ref, "--references", ref, "--metadata", corpus / "test.meta.jsonl",
               "--json", "-q") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["bleu"] == 1.0
    assert payload["phrase_accuracy"]["recall"] == 1.0


def test_eval_text_report(corpus, capsys):
    ref = corpus / "test.tgt"
    assert run("eval", "--candidates", ref, "--references", ref, "-q") == 0
    assert "1.0" in capsys.readouterr().out


# ------------------------------------------------------------------- config


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_rules": 7, "seed": 9}))
    args = cli.build_parser().parse_args(["synth", "--config", str(cfg), "--seed", "3"])
    opts = cli.resolve(args)
    assert opts["seed"] == 3  # flag beats file
    assert opts["n_rules"] == 7  # file beats default
    assert opts["n_pairs"] == cli.DEFAULTS["synth"]["n_pairs"]


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_option": 1}))
    assert run("synth", "--config", cfg, "--out", tmp_path) == 2
    cfg.write_text("{broken")
    assert run("synth", "--config", cfg, "--out", tmp_path) == 2
    assert run("synth", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2


def test_grad_check_command(capsys):
    assert run("grad-check", "--variant", "gate", "--d-e", 3, "--d-h", 4) == 0
    assert "[gate] PASS" in capsys.readouterr().out
