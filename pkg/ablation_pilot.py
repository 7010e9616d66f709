"""Pilot for the patching-scheme ablation (dev scratch, removed before ship)."""
import time
from fractions import Fraction

import numpy as np

from patchlm import textgen
from patchlm.entropy_lm import train_counts
from patchlm.flops import blt_flops_per_byte, size_match, width_family
from patchlm.model import ModelConfig, init_params
from patchlm.patching import calibrate_threshold, make_patcher, PatchingConfig, patch_space, patch_strided
from patchlm.trainer import OptimSpec, PatchStreamLoader, eval_bpb, train

import warnings
warnings.simplefilter("ignore")

T0 = time.time()

def log(msg):
    print(f"[{time.time()-T0:7.1f}s] {msg}", flush=True)

CORPUS_BYTES = 2_000_000
STEPS0 = 800
PATCH_BUDGET = 128
N_CTX = 512  # approx bytes per stream for flops accounting

docs = [np.frombuffer(t.encode(), np.uint8)
        for t in textgen.synthetic_documents(CORPUS_BYTES // 1000, 1000, seed=500)]
rng = np.random.Generator(np.random.PCG64(999))
perm = rng.permutation(len(docs))
eval_docs = [docs[i] for i in perm[:80]]
train_docs = [docs[i] for i in perm[80:]]
log(f"{len(train_docs)} train docs, {sum(map(len,train_docs))/1e6:.2f} MB")

ent = train_counts(train_docs[:1000], order=3)
log("entropy model trained")

base = ModelConfig(enc_dim=32, global_dim=64, dec_dim=32, enc_layers=1, global_layers=4,
                   dec_layers=2, enc_heads=2, global_heads=2, dec_heads=2,
                   enc_window=64, dec_window=64, hash_vocab=2048)

# measured space patch size; entropy is calibrated to the same mean size so
# both dynamic schemes share one size-matched config
sp_stats = [patch_space(d) for d in train_docs[:400]]
np_space = sum(s.n_bytes for s in sp_stats) / sum(s.n_patches for s in sp_stats)
theta = calibrate_threshold(ent, train_docs[:400], round(np_space, 2))
log(f"space mean patch size: {np_space:.3f}; theta for matching entropy: {theta:.3f}")

fpb0 = blt_flops_per_byte(base, N_CTX, 4).total_forward
fam = width_family(base)
cfg_dyn, fpb_dyn = size_match(fpb0, fam, N_CTX, Fraction(str(round(np_space, 3))), tol=0.35)
log(f"target fpb {float(fpb0):.3e}; dynamic config enc_dim={cfg_dyn.enc_dim} fpb {float(fpb_dyn):.3e} ({float(fpb_dyn/fpb0)-1:+.1%})")

patchers = {
    "strided": (base, lambda d: patch_strided(len(d), 4)),
    "entropy": (cfg_dyn, make_patcher(PatchingConfig(scheme="entropy_global", theta_g=theta), ent)),
    "space":   (cfg_dyn, lambda d: patch_space(d)),
}

results = {}
for name, (cfg, patcher) in patchers.items():
    per_seed = []
    for seed in (0, 1):
        loader = PatchStreamLoader(train_docs, patcher, patch_budget=PATCH_BUDGET, seed=seed)
        realized = loader.mean_patch_size
        fpb = blt_flops_per_byte(cfg, N_CTX, Fraction(str(round(realized, 4)))).total_forward
        steps = max(1, round(STEPS0 * float(fpb0 / fpb) * 4.0 / realized))
        params = init_params(cfg, seed=seed)
        optim = OptimSpec(lr_peak=3e-3, warmup_steps=max(10, steps // 20), weight_decay=0.05)
        t0 = time.time()
        res = train(params, cfg, loader, optim, total_steps=steps)
        rep = eval_bpb(params, cfg, {"held": eval_docs}, patcher, max_stream_bytes=1024)
        dt = time.time() - t0
        log(f"{name} seed{seed}: n_p={realized:.2f} steps={steps} "
            f"train_loss={res.final_loss/np.log(2):.3f}bpb held={rep.bpb['held']:.4f}bpb "
            f"({dt:.0f}s, {dt/steps*1000:.0f}ms/step)")
        per_seed.append(rep.bpb["held"])
    results[name] = per_seed

log(f"results: {results}")
