# Baseline Xception vs the optimized variant: counts, structure, memory.
# Run: python3 demos/02_model_zoo.py

# %%
from edgexc import zoo

base = zoo.build("xception")
opt = zoo.build("optimized")

# %% parameter counts and the structural numbers
for spec in (base, opt):
    print(zoo.summarize(spec, batch_size=64).format())
    print()

ratio = zoo.count_trainable_params(opt) / zoo.count_trainable_params(base)
print(f"optimized / baseline parameters: {ratio:.3f}")

# %% where the residual skips sit in the optimized model
for path, flow, module in opt.iter_modules():
    r = module.residual
    print(f"{path:18s} convs={module.conv_layers} residual={r.kind:6s} skips={r.num_skips}")

# %% the first few rows of the per-layer shape trace
trace = zoo.validate_arch(opt)
print("\n".join(trace.format().splitlines()[:12]))
print("...", trace.output_shape)

# %% training memory by flow (float32, batch 64); the 32x32 entry flow dominates
mem = zoo.estimate_memory(opt, 64)
for flow, b in mem.activation_by_flow.items():
    print(f"{flow:10s} activations {b / 2**20:7.1f} MiB")

# %% width-reduced variants keep the same layout, handy for quick experiments
small = zoo.build("optimized", width_scale=1 / 8)
print(zoo.count_conv_layers(small), zoo.count_modules(small), f"{zoo.count_trainable_params(small):,}")
