"""What attention copy does to a student, on a toy model.

A student runs its forward pass with a teacher's attention maps plugged in.
The maps arrive as constants, so the student's query and key projections get
no gradient at all; only values, MLPs and the head learn.
"""
import numpy as np

from atxf import tensor as T
from atxf.transfer import TeacherContext, TransferSpec, copy_forward
from atxf.vit import LayerOverride, ViTConfig, init_params, vit_forward

cfg = ViTConfig(image_size=16, patch_size=4, depth=3, heads=2, dim=16, num_classes=5)
rng = np.random.default_rng(0)
x = rng.standard_normal((8, 3, 16, 16))
y = np.eye(5)[rng.integers(0, 5, 8)]

teacher = TeacherContext(init_params(cfg, 1))
student = init_params(cfg, 2)

# 1. A model fed its own maps is unchanged, to the last bit.
logits, rec = vit_forward(x, student)
again, _ = vit_forward(x, student, [LayerOverride(map=m) for m in rec.maps])
print("own maps reproduce logits bit-exactly:", np.array_equal(logits.data, again.data))

# 2. Copy every layer from the teacher and look at the gradients.
student.zero_grad()
logits, used, _ = copy_forward(student, teacher, x, TransferSpec(mode="copy"))
T.cross_entropy_soft(logits, y).backward()
for l in range(cfg.depth):
    norms = [np.linalg.norm(student[f"blocks.{l}.attn.{w}.weight"].grad) for w in "qkv"]
    print(f"layer {l}: |dWq| {norms[0]:.1e}  |dWk| {norms[1]:.1e}  |dWv| {norms[2]:.1e}")

# 3. Partial copy: only the last layer, and only one head in it.
student.zero_grad()
spec = TransferSpec(mode="copy", layers="2", heads_per_layer=1)
logits, used, _ = copy_forward(student, teacher, x, spec)
T.cross_entropy_soft(logits, y).backward()
print("layer 2 Wq grad still flows through the uncopied head:",
      np.linalg.norm(student["blocks.2.attn.q.weight"].grad) > 0)
print("layer 0 Wq grad (not copied):", f"{np.linalg.norm(student['blocks.0.attn.q.weight'].grad):.2e}")
