"""How expensive is relevance prediction next to the LLM it prunes for?

Computes the analytical FLOPs of the visual-token stream through a
28-layer, 3584-wide LLM with 1568 visual tokens, the attention-only share,
and the cost of the depthwise-separable compressor on the same tokens.

    python3 demos/flops_audit.py
"""

from relevprune import flops as F

N_VISUAL = 1568
llm = F.LlmFlopsConfig(n=N_VISUAL, d=3584, m=18944, l=3, n_layers_lm=28)

print("Shares against the computed LLM cost:")
rep = F.report(llm, F.ConvFlopsConfig.from_channels(N_VISUAL))
print(rep.to_markdown())

print("Shares against the commonly quoted 11.69 TFLOPs total:")
stated = F.report(llm, F.ConvFlopsConfig.from_channels(N_VISUAL), F.STATED_LLM_TOTAL)
print(stated.to_markdown())

no_head = F.flops_conv(F.ConvFlopsConfig.from_channels(N_VISUAL, include_final_pointwise=False))
print(f"Compressor without its 512->1 output layer: {no_head:,} FLOPs "
      f"({rep.flops_conv - no_head:,} fewer)")

# both counts are linear in N_v, so the ratio stays fixed as the image grows
for n in (576, 1568, 2880, 5000):
    conv = F.flops_conv(F.ConvFlopsConfig.from_channels(n))
    attn = F.flops_attn(n, 3584)
    print(f"N_v={n:5d}  attention {attn / 1e9:9.2f} GFLOPs  compressor {conv / 1e9:6.3f} GFLOPs  "
          f"ratio {attn / conv:7.1f}x")
