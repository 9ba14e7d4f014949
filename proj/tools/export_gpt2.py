#!/usr/bin/env python3
"""Export a HuggingFace causal language model for the `lm` candidate provider.

Writes <out>/lm.pt (TorchScript: ids[1, L] -> logits[1, L, V]) and
<out>/lm.json ({"bos": id, "words": {word: [ids]}}). The provider ranks
every listed word as a fill-in, so keep the word list to plausible prompt
vocabulary.

    python3 tools/export_gpt2.py --model gpt2 --words synonyms.txt --out models/gpt2
"""

import argparse
import json
import pathlib

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer, GPT2Config, GPT2LMHeadModel

PROMPT_POOL = [
    "a", "photo", "of", "the", "picture", "image", "clean", "bad", "small", "large",
    "drawing", "an", "good", "blurry", "bright", "dark", "shape", "icon", "sketch",
    "simple", "toy", "big", "nice", "plain", "cropped", "close-up", "rendering", "art",
]


class Logits(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, ids):
        return self.model(input_ids=ids, use_cache=False).logits


def read_words(paths):
    words = list(PROMPT_POOL)
    for p in paths:
        for line in pathlib.Path(p).read_text().splitlines():
            line = line.split("#", 1)[0].replace(":", " ").replace(",", " ")
            words.extend(w for w in line.split() if w)
    return list(dict.fromkeys(words))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", default="gpt2", help="hub id or local directory")
    ap.add_argument("--words", nargs="*", default=[], help="files of extra words")
    ap.add_argument("--tiny-random", action="store_true",
                    help="export a small randomly initialised model (smoke test, no download)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    word_list = read_words(args.words)
    if args.tiny_random:
        words = {w: [i + 1] for i, w in enumerate(word_list)}
        bos = 0
        torch.manual_seed(0)
        model = GPT2LMHeadModel(GPT2Config(vocab_size=len(word_list) + 1, n_positions=32, n_embd=32,
                                           n_layer=2, n_head=2, bos_token_id=bos, eos_token_id=bos))
    else:
        tokenizer = AutoTokenizer.from_pretrained(args.model)
        model = AutoModelForCausalLM.from_pretrained(args.model)
        bos = tokenizer.bos_token_id
        # Words follow other words inside the prompt, so encode them with a leading space.
        words = {w: tokenizer(" " + w, add_special_tokens=False).input_ids for w in word_list}
    model.eval()

    with torch.no_grad():
        traced = torch.jit.trace(Logits(model), torch.tensor([[bos, 1, 2, 3]]), check_trace=False)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traced.save(str(out / "lm.pt"))
    (out / "lm.json").write_text(json.dumps({"bos": bos, "words": words}, indent=1))
    print(f"{args.model if not args.tiny_random else 'tiny-random'}: {len(words)} words -> {out}")


if __name__ == "__main__":
    main()
