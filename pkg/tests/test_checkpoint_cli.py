import json

import numpy as np
import pytest

from toktrans import checkpoint as ckpt
from toktrans.cli import main
from toktrans.config import ConfigError, config_from_dict, default_seed, load_config, verify_config_hash
from toktrans.coupling import Marginals, dykstra_project, init_weights
from toktrans.lm import LmConfig, init_params, mean_block_nll
from toktrans.synthetic import english_like_corpus, protein_like_corpus, write_fasta, write_text
from toktrans.train import SUITE_COLUMNS, SUITE_MODES, transfer_translator


def test_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
               "ids": np.arange(7), "empty": np.zeros((0, 3))}
    path = tmp_path / "x.s2t2"
    ckpt.save_checkpoint(path, tensors, {"seed": 1, "note": "hi"})
    back, meta = ckpt.load_checkpoint(path)
    assert meta == {"seed": 1, "note": "hi"}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert path.read_bytes()[:4] == b"S2T2"


def test_model_round_trip(tmp_path):
    model = init_params(LmConfig(vocab=11, d=8, n_layers=2, n_heads=2, context_len=6), seed=3)
    ckpt.save_model(tmp_path / "m", model, {"seed": 3})
    back, meta = ckpt.load_model(tmp_path / "m")
    assert back.config == model.config and meta["seed"] == 3
    for k, t in model.params.items():
        assert back.params[k].data.tobytes() == t.data.tobytes()


def test_truncated_file_names_missing_region(tmp_path):
    path = tmp_path / "x"
    ckpt.save_checkpoint(path, {"a": np.ones(100)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ckpt.CheckpointError, match=r"bytes \d+\.\.\d+ missing"):
        ckpt.load_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(ckpt.CheckpointError, match="header"):
        ckpt.load_checkpoint(path)
    path.write_bytes(raw[:5])
    with pytest.raises(ckpt.CheckpointError, match="prefix"):
        ckpt.load_checkpoint(path)


def test_corrupt_header_and_magic(tmp_path):
    path = tmp_path / "x"
    ckpt.save_checkpoint(path, {"a": np.ones(4), "b": np.ones(4)})
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(path)
    # point both tensors at the same bytes
    text = bytes(raw).replace(b'"offset": 32', b'"offset":  0')  # same header length
    path.write_bytes(text)
    with pytest.raises(ckpt.CheckpointError, match="overlap"):
        ckpt.load_checkpoint(path)


def test_unknown_header_fields_are_ignored(tmp_path):
    import struct

    header = {"tensors": {"a": {"dtype": "f8", "shape": [2], "offset": 0, "nbytes": 16, "future": 1}},
              "metadata": {}, "extra": [1, 2]}
    h = json.dumps(header).encode()
    path = tmp_path / "x"
    path.write_bytes(struct.pack("<4sIQ", b"S2T2", 1, len(h)) + h + np.array([1.5, 2.5]).tobytes())
    tensors, _ = ckpt.load_checkpoint(path)
    np.testing.assert_array_equal(tensors["a"], [1.5, 2.5])


def test_coupling_saved_by_one_run_drives_transfer_in_another(tmp_path):
    m = Marginals.uniform(9, 5)
    cp = dykstra_project(init_weights(9, 5, "gaussian", np.random.default_rng(0)), m)
    ckpt.save_coupling(tmp_path / "c", cp, weights=np.ones((9, 5)), metadata={"seed": 0})
    loaded, C, meta = ckpt.load_coupling(tmp_path / "c")
    assert loaded.P.tobytes() == cp.P.tobytes() and C.shape == (9, 5)
    target = init_params(LmConfig(vocab=9, d=8, n_layers=1, n_heads=2, context_len=6), seed=4)
    a = transfer_translator(loaded, target)
    b = transfer_translator(cp, target)
    blocks = np.random.default_rng(1).integers(0, 5, size=(3, 6))
    assert mean_block_nll(a, blocks) == mean_block_nll(b, blocks)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_model(tmp_path / "c")


def test_config_validation(tmp_path):
    exp = config_from_dict({"run": {"mode": "s2t2", "steps": 5}, "seeds": [1, 2]})
    assert exp.run.steps == 5 and exp.seeds == [1, 2]
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"run": {"stpes": 5}})
    with pytest.raises(ConfigError):
        config_from_dict({"run": {"steps": "five"}})
    with pytest.raises(ConfigError):
        config_from_dict({"run": {"mode": "nope"}})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": True})
    (tmp_path / "c.json").write_text("{oops")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    assert exp.hash() == config_from_dict(exp.to_dict()).hash()


def test_seed_environment_fallback(monkeypatch):
    monkeypatch.setenv("TOKTRANS_SEED", "17")
    assert default_seed() == 17
    monkeypatch.setenv("TOKTRANS_SEED", "x")
    with pytest.raises(ConfigError):
        default_seed()


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_text(english_like_corpus(150, seed=0), d / "en.txt")
    write_fasta(protein_like_corpus(60, seed=0), d / "prot.fasta")
    write_fasta(protein_like_corpus(20, seed=1), d / "held.fasta")
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_pipeline(workspace, capsys):
    w = workspace
    code, out, _ = run(capsys, "tokenizer", "train", "--input", w / "prot.fasta", "--vocab-size", 60,
                       "--alphabet", "corpus", "--out", w / "tok.json")
    assert code == 0 and json.loads(out)["vocab_size"] == 60
    code, out, _ = run(capsys, "tokenizer", "stats", "--tokenizer", w / "tok.json", "--input",
                       w / "held.fasta", "--reference", 1.82)
    stats = json.loads(out)
    assert code == 0 and stats["reference"] == 1.82 and stats["compression_ratio"] > 1

    code, _, _ = run(capsys, "--seed", 1, "pretrain", "--input", w / "en.txt", "--out", w / "src.ckpt",
                     "--d", 8, "--layers", 1, "--heads", 2, "--context-len", 16, "--steps", 3)
    assert code == 0
    _, meta = ckpt.load_model(w / "src.ckpt")
    assert verify_config_hash(meta) and meta["seed"] == 1
    tampered = {**meta, "config_doc": {**meta["config_doc"], "steps": 999}}
    assert not verify_config_hash(tampered)

    for mode in ("s2t2", "dense_sinkhorn", "unconstrained"):
        code, out, _ = run(capsys, "translate", "train", "--model", w / "src.ckpt", "--tokenizer",
                           w / "tok.json", "--input", w / "prot.fasta", "--out", w / f"{mode}.tr",
                           "--mode", mode, "--steps", 3, "--batch-size", 2, "--metrics", w / f"{mode}.jsonl",
                           "--model-out", w / f"{mode}.model")
        assert code == 0, out
        lines = (w / f"{mode}.jsonl").read_text().splitlines()
        assert len(lines) == 3 and set(json.loads(lines[0])) >= {"step", "lr", "loss", "nll"}
    code, out, _ = run(capsys, "translate", "train", "--model", w / "src.ckpt", "--tokenizer",
                       w / "tok.json", "--input", w / "prot.fasta", "--out", w / "emp.tr", "--steps", 1,
                       "--marginals", "empirical", "--source-corpus", w / "en.txt",
                       "--embedding-scaling", "nu", "--entropy-alpha", 0.01)
    assert code == 0

    for init, extra in (("s2t2", ["--translator", w / "s2t2.tr"]), ("dense", ["--translator", w / "dense_sinkhorn.tr"]),
                        ("unconstrained", ["--translator", w / "unconstrained.tr"]), ("orig-tok", []),
                        ("new-tok-truncate", [])):
        code, out, err = run(capsys, "finetune", "--model", w / "src.ckpt", "--init", init, "--tokenizer",
                             w / "tok.json", "--input", w / "prot.fasta", "--out", w / f"ft-{init}.ckpt",
                             "--steps", 2, "--batch-size", 2, *extra)
        assert code == 0, err
    code, out, _ = run(capsys, "eval", "--model", w / "ft-s2t2.ckpt", "--tokenizer", w / "tok.json",
                       "--input", w / "held.fasta")
    rep = json.loads(out)
    assert code == 0 and set(rep) >= {"mean_nll", "perplexity", "bits_per_byte", "token_count", "byte_count"}
    code, out, _ = run(capsys, "eval", "--model", w / "ft-orig-tok.ckpt", "--tokenizer", "byte",
                       "--input", w / "held.fasta")
    assert code == 0

    code, _, _ = run(capsys, "pretrain", "--input", w / "en.txt", "--out", w / "big.ckpt", "--d", 16,
                     "--layers", 1, "--heads", 2, "--context-len", 16, "--steps", 2)
    code, out, _ = run(capsys, "transfer", "--coupling", w / "s2t2.tr", "--model", w / "big.ckpt",
                       "--out", w / "big-tr.ckpt", "--tokenizer", w / "tok.json", "--input", w / "held.fasta")
    assert code == 0 and "eval" in json.loads(out)


def test_cli_errors_are_structured(workspace, capsys, tmp_path):
    w = workspace
    code, _, err = run(capsys, "eval", "--model", tmp_path / "missing", "--tokenizer", "byte", "--input",
                       w / "held.fasta")
    assert code == 3
    assert set(json.loads(err.strip().splitlines()[-1])) == {"error", "code", "message"}
    code, _, _ = run(capsys, "tokenizer", "train", "--input", w / "prot.fasta", "--vocab-size", 3,
                     "--out", tmp_path / "t.json")
    assert code == 2
    code, _, _ = run(capsys, "no-such-command")
    assert code == 2
    code, _, err = run(capsys, "finetune", "--model", w / "src.ckpt", "--init", "s2t2", "--tokenizer",
                       w / "tok.json", "--input", w / "prot.fasta", "--out", tmp_path / "x")
    assert code == 2 and "translator" in err
    bad = tmp_path / "bad.fasta"
    bad.write_text("MKV\n>h\nAA\n")
    code, _, err = run(capsys, "tokenizer", "stats", "--tokenizer", "byte", "--input", bad)
    assert code == 3 and ":1:" in err
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"run": {"bogus": 1}}))
    code, _, _ = run(capsys, "suite", "--config", cfg)
    assert code == 2
    # a checkpoint holding NaN weights is a numerical failure
    model, meta = ckpt.load_model(w / "src.ckpt")
    arrays = {f"model/{k}": v.copy() for k, v in model.arrays().items()}
    arrays["model/E"][0, 0] = np.nan
    ckpt.save_checkpoint(tmp_path / "nan.ckpt", arrays, meta)
    code, _, _ = run(capsys, "eval", "--model", tmp_path / "nan.ckpt", "--tokenizer", "byte",
                     "--input", w / "held.fasta")
    assert code == 4


def test_cli_seed_controls_randomness(workspace, capsys, tmp_path, monkeypatch):
    w = workspace
    outs = []
    for i, seed in enumerate((5, 5, 6)):
        monkeypatch.setenv("TOKTRANS_SEED", str(seed))
        run(capsys, "pretrain", "--input", w / "en.txt", "--out", tmp_path / f"{i}.ckpt", "--d", 8,
            "--layers", 1, "--heads", 2, "--context-len", 16, "--steps", 2, "--metrics", tmp_path / f"{i}.jsonl")
        outs.append((tmp_path / f"{i}.ckpt").read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]


def test_suite_schema(workspace, capsys, tmp_path):
    w = workspace
    cfg = {"paths": {"source_corpus": str(w / "en.txt"), "target_corpus": str(w / "prot.fasta")},
           "model": {"d": 8, "n_layers": 1, "n_heads": 2, "pretrain_steps": 2},
           "run": {"steps": 2, "batch_size": 2, "context_len": 16}, "target_vocab": 40, "seeds": [0]}
    (tmp_path / "suite.json").write_text(json.dumps(cfg))
    code, out, err = run(capsys, "suite", "--config", tmp_path / "suite.json", "--out", tmp_path / "table.json")
    assert code == 0, err
    table = json.loads((tmp_path / "table.json").read_text())
    assert tuple(table["columns"]) == SUITE_COLUMNS
    assert sorted(r["mode"] for r in table["rows"]) == sorted(SUITE_MODES)
    for r in table["rows"]:
        assert set(SUITE_COLUMNS) <= set(r)
        assert np.isfinite(r["perplexity"]) and np.isfinite(r["bpb"])
    assert "s2t2+cft" in out
