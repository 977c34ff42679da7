"""
Pretrain once, then probe the frozen encoder
============================================

A shortened pretraining run (pass an epoch count to change it, 45 is the full
schedule) followed by every downstream probe: 1-NN retrieval, a linear probe,
occlusion robustness and masked-prediction error.
"""

import sys
import time

from pcm3.benchmark import untrained_knn
from pcm3.data import generate_synthetic
from pcm3.evaluation import extract_features, knn_eval, linear_probe, masked_pred_error, occlusion_eval
from pcm3.trainer import TrainConfig, pretrain

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
train, test = generate_synthetic()

cfg = TrainConfig(epochs=epochs)
t0 = time.perf_counter()
result = pretrain(train, cfg, "pcm3", progress=lambda e, r: print(f"epoch {e:2d}  loss {r.losses.total:8.3f}"))
print(f"pretrained {epochs} epochs in {time.perf_counter() - t0:.0f}s")

# Prompts only exist during pretraining; probes see the prompt-free encoder.
model = result.inference_model()
bank = extract_features(model, train)
test_bank = extract_features(model, test)

print(f"untrained 1-NN   {untrained_knn(train, test, seed=0):.3f}")
print(f"pretrained 1-NN  {knn_eval(bank, test_bank).accuracy:.3f}")
print(f"linear probe     {linear_probe(bank, test_bank).accuracy:.3f}")

for strategy, r in occlusion_eval(result.model, train, test, train_bank=bank).items():
    print(f"{strategy:<8} occlusion: accuracy {r.accuracy:.3f} (drop {r.extra['delta']:+.3f})")
print(f"masked prediction error {masked_pred_error(result.model, test):.4f}")
