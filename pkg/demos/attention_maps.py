"""Where do the global tokens look?

Enhances one synthetic mixture and summarises each In-CA map: for a
time-global token the weights over frames at every frequency bin, for a
frequency-global token the weights over bins in every frame. The entropy
relative to a uniform map is printed per token (1.0 means uniform); maps are
written as CSV and PGM into ``--out``.

A freshly initialised network attends almost uniformly (small initial
weights give near-equal scores); pass a trained checkpoint to see structure.

    python demos/attention_maps.py --out /tmp/maps
    python demos/attention_maps.py --config configs/smoke.toml --checkpoint runs/smoke/model.tse
"""

import argparse

import numpy as np

from trident import config
from trident.capture import export_attention
from trident.checkpoint import load
from trident.data import MixSpec
from trident.model import PRESETS, TridentNet


def relative_entropy(p, axis):
    p = np.clip(p, 1e-12, None)
    h = -(p * np.log(p)).sum(axis=axis)
    return float(np.mean(h / np.log(p.shape[axis])))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="attention_maps")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="run config of the checkpoint (default: tiny preset)")
    ap.add_argument("--checkpoint", help="trained model.tse")
    args = ap.parse_args()

    noisy, _, _ = MixSpec(5.0, 11, 12, "pink", 1.0).realize()
    model_cfg = config.load(args.config).model if args.config else PRESETS["tiny"]
    net = TridentNet(model_cfg, seed=args.seed)
    if args.checkpoint:
        net.load_state_dict(load(args.checkpoint))
    else:
        net(noisy[None])  # one training-mode pass sets the batch-norm statistics
    net.eval()
    cap = net(noisy[None], capture=True).capture

    for block, branch in cap.blocks():
        sal = cap.saliency(block, branch)[0]  # (tokens, T, F)
        axis = 0 if branch == "t" else 1
        ents = [relative_entropy(m, axis) for m in sal]
        print(f"block {block} {branch}-global: relative entropy per token " + " ".join(f"{e:.3f}" for e in ents))

    written = export_attention(cap, args.out)
    print(f"wrote {len(written)} maps to {args.out}")


if __name__ == "__main__":
    main()
