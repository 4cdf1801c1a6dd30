import sys

import numpy as np
import pytest

from more.dataset import build_tokenizer, gen_synthetic_triples
from more.encoders import LoraConfig, TextConfig, VitConfig
from more.model import ModelConfig
from more.trainer import prepare


def tiny_model_config(vocab_size, seed=0, depth=1, dim=16):
    return ModelConfig(
        vit=VitConfig(depth=depth, heads=2, dim=dim, image_size=32, patch_size=16),
        text=TextConfig(vocab_size=vocab_size, dim=dim, depth=depth, heads=2, max_len=64, lora=LoraConfig(rank=2, alpha=4)),
        proj_hidden=dim,
        proj_out=8,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_corpus():
    ds = gen_synthetic_triples(3, 4, image_size=32, seed=3)
    tok = build_tokenizer([s.xray_note + " " + s.ecg_note for s in ds.samples])
    return ds, tok, prepare(ds.samples, tok, ds.classes)


@pytest.fixture
def tiny_model(tiny_corpus):
    from more.model import MoreModel

    _, tok, _ = tiny_corpus
    return MoreModel(tiny_model_config(len(tok)))


def param_digest(module):
    import hashlib

    out = {}
    for name, p in module.named_parameters():
        out[name] = hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
