"""Parameter accounting: a breakdown for the default model and a search for a ~1.30M-parameter config."""

import itertools

from tomformer.model import ModelConfig, count_parameters, init_parameters, parameter_shapes

cfg = ModelConfig()
print("default config:", count_parameters(cfg), "parameters")
print("instantiated:  ", init_parameters(cfg, 0).total_size())
for name, shape in parameter_shapes(cfg)[:6]:
    print(f"  {name:<24} {shape}")
print("  ...")

# search 224x224 inputs with 16-pixel patches for totals close to 1.30M
TARGET = 1_300_000
rows = []
for d, layers, mlp, head in itertools.product((128, 144, 160), (3, 4, 5, 6), range(128, 513, 32), (128, 256)):
    c = ModelConfig(
        image_height=224, image_width=224, patch_size=16, embed_dim=d, num_heads=8, num_layers=layers,
        mlp_hidden_dims=(mlp, mlp), head_hidden_dims=(head, head),
    )
    n = count_parameters(c)
    rows.append((abs(n - TARGET), d, layers, mlp, head, n))
rows.sort()
print(f"\n{'D':>4} {'layers':>6} {'mlp':>5} {'head':>5} {'params':>10} {'off by':>8}")
for _, d, layers, mlp, head, n in rows[:10]:
    print(f"{d:>4} {layers:>6} {mlp:>5} {head:>5} {n:>10,} {100 * (n - TARGET) / TARGET:>+7.2f}%")

# the one kept in configs/paper_scale.json
chosen = ModelConfig.from_dict(
    {"image_height": 224, "image_width": 224, "patch_size": 16, "embed_dim": 128, "num_heads": 8,
     "num_layers": 5, "mlp_hidden_dims": [256, 256], "head_hidden_dims": [128, 128]}
)
print("\nchosen:", count_parameters(chosen), "with CNN stages", chosen.cnn_stages)
