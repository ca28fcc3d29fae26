"""Attention distillation loss and head matching between two models.

The distillation loss is a cross-entropy with the teacher's maps as soft
targets; it never drops below the teacher's own entropy, and equals it
exactly when the student reproduces the maps.  Head matching then asks how
similar two models' heads are once we allow them to be reordered.
"""
import numpy as np

from atxf import analysis as A
from atxf import tensor as T
from atxf.transfer import TransferSpec, attention_distill_loss, mean_map_entropy
from atxf.vit import ViTConfig, ViTParams, init_params, vit_forward

rng = np.random.default_rng(0)
spec = TransferSpec(mode="distill", layers="all")

teacher_logits = rng.standard_normal((4, 3, 9, 9)) * 2
teacher_maps = T.softmax_array(teacher_logits)
h = mean_map_entropy([teacher_maps], spec)
for name, s in [("random student", rng.standard_normal(teacher_logits.shape)),
                ("shifted logits", teacher_logits + 5.0),  # softmax ignores row shifts
                ("half temperature", teacher_logits * 0.5)]:
    loss = attention_distill_loss([T.Tensor(s)], [teacher_maps], spec).item()
    print(f"{name:>16s}: loss {loss:.4f}  excess over teacher entropy {loss - h:.2e}")

# Head matching: the same model with heads shuffled matches perfectly under
# bipartite matching but not under the naive index-by-index comparison.
cfg = ViTConfig(image_size=16, patch_size=4, depth=2, heads=4, dim=16, num_classes=3)
x = rng.standard_normal((16, 3, 16, 16))


def sharp_model(seed):
    # fresh inits attend almost uniformly; bigger Q/K weights give distinct heads
    arrays = init_params(cfg, seed).arrays()
    r = np.random.default_rng(seed)
    for name in arrays:
        if ".attn.q." in name or ".attn.k." in name:
            arrays[name] = r.standard_normal(arrays[name].shape)
    return ViTParams.from_arrays(cfg, arrays)


_, rec = vit_forward(x, sharp_model(3))
maps = rec.stacked_maps()
shuffled = maps[:, :, [2, 0, 3, 1]]
for strategy in A.STRATEGIES:
    s = A.match_heads(maps, shuffled, 0, strategy)
    print(f"{strategy:>9s}: total JSD {s.total:.4f}  pairs {s.pairs}")

_, other = vit_forward(x, sharp_model(4))
report = A.head_match_report(rec, other, "bipartite")
print("unrelated model, mean matched JSD per layer:", np.round(report.layer_means(), 4))
