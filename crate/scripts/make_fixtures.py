"""Generate reference fixtures for the resflow test suites.

Writes into crates/core/tests/fixtures/:

  tiny-gpt2/             random-weight GPT-2 (real 50257-token vocabulary)
                         saved by `transformers` in f16
  tiny-gpt2-reference.safetensors
                         float64 reference final-position logits (stored f16)
  tiny-gpt2-reference.json
                         prompts, reference token ids, argmax and top-2 gap
  tokenizer-corpus.jsonl 1000 sentences with reference GPT-2 token ids

Usage: python scripts/make_fixtures.py
"""

import json
import re
import importlib
import random
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

ROOT = Path(__file__).resolve().parent.parent
ASSETS = ROOT / "crates/core/assets/gpt2"
FIXTURES = ROOT / "crates/core/tests/fixtures"

PROMPTS = [
    "The capital of France is",
    "Hello world",
    "When Mary and John went to the store, John gave a drink to",
    "The Eiffel Tower is located in the city of",
    "1, 2, 3, 4,",
    "She opened the door and",
    "In 1969, astronauts landed on the",
    "def fibonacci(n):",
    "The quick brown fox jumps over the lazy",
    "I can't believe it's already",
    "Water boils at 100 degrees",
    "The opposite of hot is",
    "My favourite colour is blue, and my sister's is",
    "   leading spaces and\ttabs",
    "Rome is the capital of",
    "The sun rises in the",
    "A B C D E F",
    "It was the best of times, it was the worst of",
    "Café, naïve, résumé",
    "The results were surprising:",
]

SEED = 20240817


def tokenizer():
    return GPT2Tokenizer.from_pretrained(str(ASSETS))


def build_model():
    torch.manual_seed(SEED)
    config = GPT2Config(
        vocab_size=50257,
        n_positions=64,
        n_embd=32,
        n_layer=2,
        n_head=4,
        n_inner=128,
        activation_function="gelu_new",
        layer_norm_epsilon=1e-5,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.1 * torch.randn_like(p))
            else:
                p.copy_(0.25 * torch.randn_like(p))
        # Round through f16 so the stored archive is exactly what the reference saw.
        for p in model.parameters():
            p.copy_(p.half().float())
    model.eval()
    return model


def write_model(model):
    out = FIXTURES / "tiny-gpt2"
    out.mkdir(parents=True, exist_ok=True)
    model.half().save_pretrained(out, safe_serialization=True)
    model.float()
    cfg = json.loads((out / "config.json").read_text())
    cfg["vocab_file"] = "../../../assets/gpt2/vocab.json"
    cfg["merges_file"] = "../../../assets/gpt2/merges.txt"
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for extra in out.glob("generation_config.json"):
        extra.unlink()


def reference_logits(model, tok):
    model = model.double()
    rows, meta = [], []
    with torch.no_grad():
        for text in PROMPTS:
            ids = tok.encode(text)
            logits = model(torch.tensor([ids])).logits[0, -1]
            top = torch.topk(logits, 2)
            rows.append(logits)
            meta.append(
                {
                    "text": text,
                    "ids": ids,
                    "argmax": int(top.indices[0]),
                    "gap": float(top.values[0] - top.values[1]),
                }
            )
    model.float()
    return torch.stack(rows), meta


def stdlib_sentences():
    """Sentences from standard-library docstrings, in a fixed order."""
    seen, out = set(), []
    skip = {"this", "antigravity", "idlelib", "turtledemo", "tkinter", "turtle", "webbrowser"}
    names = sorted(n for n in sys.stdlib_module_names if not n.startswith("_") and n not in skip)
    for name in names:
        try:
            mod = importlib.import_module(name)
        except Exception:
            continue
        doc = getattr(mod, "__doc__", None) or ""
        for part in re.split(r"(?<=[.!?])\s+|\n\s*\n", doc):
            s = " ".join(part.split())
            if 12 <= len(s) <= 240 and s not in seen:
                seen.add(s)
                out.append(s)
    return out


EDGE_CASES = [
    "I'm sure you'll see they've done what we'd planned.",
    "Don't stop; it's THE END!!!",
    "Numbers: 3.14159, 2,718 and 1e-10.",
    "Trailing spaces   ",
    "   Leading spaces",
    "Tabs\tand\nnewlines\n\nand\r\nCRLF",
    "Emoji 😀 and 🇫🇷 flags",
    "日本語のテキスト と English mixed",
    "Ünïcödé àccents çà et là",
    "Привет, мир! Как дела?",
    "مرحبا بالعالم",
    "email@example.com and https://example.org/path?q=1&r=2",
    "    def f(x):\n        return x ** 2",
    "$$$ %%% ^^^ &&& ***",
    "a  b   c    d     e",
    "'s 't 're 've 'm 'll 'd",
    "HELLO'S world'LL",
    "x=1;y=2;z=x+y",
    " non-breaking spaces em space",
    "Zero​width joiner",
    "A sentence with a very looooooooooooooooooooooong word.",
    "1234567890 0987654321",
    "!!!???...,,,",
    " ",
    "\n",
]


def corpus(tok, n=1000):
    rng = random.Random(SEED)
    sentences = stdlib_sentences()
    rng.shuffle(sentences)
    texts = EDGE_CASES + sentences[: n - len(EDGE_CASES)]
    assert len(texts) == n, f"only {len(texts)} sentences available"
    return [{"text": t, "ids": tok.encode(t)} for t in texts]


def main():
    tok = tokenizer()
    assert tok.encode("Hello world") == [15496, 995]

    model = build_model()
    logits, meta = reference_logits(model, tok)
    write_model(model)
    save_file({"logits": logits.to(torch.float16).contiguous()}, FIXTURES / "tiny-gpt2-reference.safetensors")
    (FIXTURES / "tiny-gpt2-reference.json").write_text(json.dumps(meta, indent=1, ensure_ascii=False) + "\n")
    print("smallest top-2 gap:", min(m["gap"] for m in meta))

    with open(FIXTURES / "tokenizer-corpus.jsonl", "w", encoding="utf-8") as f:
        for row in corpus(tok):
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
