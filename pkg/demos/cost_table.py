"""Parameter and FLOP budget of the built-in model sizes.

Prints the analytic counts next to the published figures and a per-component
breakdown for the M model. The companion branches hold few parameters but
more than half of the compute: their cross-attentions touch every T-F
position of the main grid, once to gather into the tokens and once to
broadcast back.

    python demos/cost_table.py
"""

from trident.cost import count_params, estimate_flops, flops_breakdown
from trident.model import PRESETS

PUBLISHED = {"S": (1.00, 19.8), "M": (1.42, 28.7), "L": (3.03, 59.8), "G1": (None, 18.3)}


def main():
    print(f"{'model':<6}{'params (M)':>12}{'published':>11}{'GFLOPs':>9}{'published':>11}")
    for name, (p_ref, f_ref) in PUBLISHED.items():
        cfg = PRESETS[name]
        p = count_params(cfg) / 1e6
        f = estimate_flops(cfg, 3.0) / 1e9
        p_txt = f"{p_ref:.2f}" if p_ref else "-"
        print(f"{name:<6}{p:>12.3f}{p_txt:>11}{f:>9.2f}{f_ref:>11.1f}")

    print("\nM model, 3 s input:")
    parts = flops_breakdown(PRESETS["M"], 3.0)
    total = sum(parts.values())
    for k, v in parts.items():
        print(f"  {k:<14}{v / 1e9:8.2f} G  {v / total:6.1%}")

    no_tokens = PRESETS["M"].replace(tokens_t=0, tokens_f=0)
    share = 1 - estimate_flops(no_tokens) / estimate_flops(PRESETS["M"])
    print(f"\ncompanion branches account for {share:.1%} of the M model's compute")
    print(f"two-FLOPs-per-MAC count for M: {estimate_flops(PRESETS['M'], mac_flops=2) / 1e9:.1f} G")


if __name__ == "__main__":
    main()
