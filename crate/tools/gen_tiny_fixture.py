"""Generate the synthetic small-GPT-2 fixture used by the engine-fidelity tests.

Writes data/fixtures/tiny_gpt2.safetensors (float32, GPT-2 tensor names) and
data/fixtures/tiny_gpt2_logits.json (float64 reference logits from the
HuggingFace GPT-2 implementation). Deterministic under the fixed seed.
"""
import json
import pathlib

import numpy as np
import torch
from safetensors.numpy import save_file
from transformers import GPT2Config, GPT2LMHeadModel

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "fixtures"
SEED = 20240611

cfg = GPT2Config(vocab_size=1024, n_positions=64, n_embd=48, n_layer=3, n_head=4,
                 layer_norm_epsilon=1e-5, activation_function="gelu_new",
                 resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
torch.manual_seed(SEED)
model = GPT2LMHeadModel(cfg).eval()

rng = np.random.default_rng(SEED)
with torch.no_grad():
    for name, p in model.named_parameters():
        if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
            p.copy_(torch.tensor(rng.uniform(0.5, 1.5, p.shape)))
        elif ".ln_" in name and name.endswith("bias") or name.endswith("ln_f.bias"):
            p.copy_(torch.tensor(rng.normal(0.0, 0.2, p.shape)))
        elif name.endswith("bias"):
            p.copy_(torch.tensor(rng.normal(0.0, 0.1, p.shape)))
        elif "c_attn" in name:
            p.copy_(torch.tensor(rng.normal(0.0, 0.35, p.shape)))
        else:
            p.copy_(torch.tensor(rng.normal(0.0, 0.15, p.shape)))

tensors = {}
for name, p in model.transformer.named_parameters():
    tensors[name] = p.detach().numpy().astype(np.float32)
OUT.mkdir(parents=True, exist_ok=True)
save_file(tensors, str(OUT / "tiny_gpt2.safetensors"),
          metadata={"n_head": str(cfg.n_head), "layer_norm_epsilon": str(cfg.layer_norm_epsilon)})

# reference forward in float64 from the float32-rounded weights
model = model.double()
with torch.no_grad():
    for name, p in model.transformer.named_parameters():
        p.copy_(torch.tensor(tensors[name].astype(np.float64)))

prompts = []
prng = np.random.default_rng(SEED + 1)
for k in range(5):
    n = 6 + 2 * k
    ids = [int(x) for x in prng.integers(0, cfg.vocab_size, n)]
    with torch.no_grad():
        logits = model(torch.tensor([ids])).logits[0].numpy()
    prompts.append({"ids": ids, "logits": [[float(v) for v in row] for row in logits]})

meta = {
    "model": "synthetic-gpt2",
    "config": {"vocab": cfg.vocab_size, "ctx": cfg.n_positions, "d_model": cfg.n_embd,
               "n_layers": cfg.n_layer, "n_heads": cfg.n_head, "ln_eps": cfg.layer_norm_epsilon},
    "seed": SEED,
    "prompts": prompts,
}
(OUT / "tiny_gpt2_logits.json").write_text(json.dumps(meta, indent=1) + "\n")
print("wrote", OUT)
