#!/usr/bin/env python3
"""Export a HuggingFace CLIP checkpoint for the `clip` surrogate backend.

Writes <out>/clip.pt (TorchScript with encode_image / encode_text) and
<out>/clip.json (tokenization and preprocessing sidecar). Only the words
listed via --words (plus the built-in prompt pool) can appear in prompts.

    python3 tools/export_clip.py --model openai/clip-vit-base-patch32 \
        --words classes.txt --out models/clip
"""

import argparse
import json
import pathlib

import torch
from transformers import CLIPConfig, CLIPModel, CLIPTokenizer

KNOWN_VARIANTS = {
    "openai/clip-vit-base-patch32": "ViT-B/32",
    "openai/clip-vit-base-patch16": "ViT-B/16",
    "openai/clip-vit-large-patch14": "ViT-L/14",
}

PROMPT_POOL = [
    "a", "photo", "of", "the", "picture", "image", "clean", "bad", "small", "large",
    "drawing", "an", "good", "blurry", "bright", "dark", "shape", "icon", "sketch",
    "simple", "toy", "big", "nice", "plain", "cropped", "close-up", "rendering", "art",
]

CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]


class Towers(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def encode_image(self, pixels):
        return self.model.get_image_features(pixel_values=pixels)

    def encode_text(self, ids):
        return self.model.get_text_features(input_ids=ids)


def features(out):
    # Newer transformers versions return an output object instead of a tensor.
    return out if torch.is_tensor(out) else out.pooler_output


class TraceableTowers(Towers):
    def encode_image(self, pixels):
        return features(super().encode_image(pixels))

    def encode_text(self, ids):
        return features(super().encode_text(ids))


def read_words(paths):
    words = list(PROMPT_POOL)
    for p in paths:
        for line in pathlib.Path(p).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            words.extend(w for w in line.replace(",", " ").split() if w)
    return list(dict.fromkeys(words))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", default="openai/clip-vit-base-patch32", help="hub id or local directory")
    ap.add_argument("--variant", help="variant name recorded in the sidecar (required for unknown models)")
    ap.add_argument("--words", nargs="*", default=[], help="files of extra words (class names, synonyms)")
    ap.add_argument("--mask-text", default="*", help="text whose tokens stand in for a masked word")
    ap.add_argument("--tiny-random", action="store_true",
                    help="export a small randomly initialised model (smoke test, no download)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    word_list = read_words(args.words)
    if args.tiny_random:
        # One id per word; end-of-text gets the largest id so either pooling
        # rule (argmax id or first eos) finds it.
        n = len(word_list)
        words = {w: [i + 1] for i, w in enumerate(word_list)}
        mask, sot, eot = [n + 1], n + 2, n + 3
        pad = eot
        cfg = CLIPConfig(
            text_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                             num_attention_heads=2, max_position_embeddings=16,
                             vocab_size=n + 4, bos_token_id=sot, eos_token_id=eot, pad_token_id=pad),
            vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                               num_attention_heads=2, image_size=32, patch_size=8),
            projection_dim=16,
        )
        torch.manual_seed(0)
        model = CLIPModel(cfg)
        variant = args.variant or "tiny-random"
    else:
        model = CLIPModel.from_pretrained(args.model)
        tokenizer = CLIPTokenizer.from_pretrained(args.model)
        variant = args.variant or KNOWN_VARIANTS.get(args.model)
        if variant is None:
            ap.error("unknown model; pass --variant")
        sot, eot = tokenizer.bos_token_id, tokenizer.eos_token_id
        pad = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else eot
        words = {}
        for w in word_list:
            ids = tokenizer(w, add_special_tokens=False).input_ids
            if ids:
                words[w] = ids
        mask = tokenizer(args.mask_text, add_special_tokens=False).input_ids
    model.eval()

    size = model.config.vision_config.image_size
    context = model.config.text_config.max_position_embeddings

    towers = TraceableTowers(model).eval()
    example_ids = torch.full((2, context), pad, dtype=torch.long)
    example_ids[:, 0] = sot
    example_ids[:, 1] = words["a"][0]
    example_ids[:, 2] = eot
    with torch.no_grad():
        traced = torch.jit.trace_module(
            towers,
            {"encode_image": torch.zeros(2, 3, size, size), "encode_text": example_ids},
            check_trace=False,
        )

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traced.save(str(out / "clip.pt"))
    sidecar = {
        "variant": variant,
        "image_size": size,
        "context_length": context,
        "sot": sot,
        "eot": eot,
        "pad": pad,
        "mean": CLIP_MEAN,
        "std": CLIP_STD,
        "temperature": float(1.0 / model.logit_scale.exp().item()),
        "mask": mask,
        "words": words,
    }
    (out / "clip.json").write_text(json.dumps(sidecar, indent=1))
    print(f"{variant}: {len(words)} words, image {size}px, context {context} -> {out}")


if __name__ == "__main__":
    main()
