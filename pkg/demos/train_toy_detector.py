"""
Training the toy detector
=========================

A short run on a handful of scenes. The full schedule (512 scenes, 12 epochs)
is ``roiattn train``; this keeps to a few seconds.
"""

import tempfile

from roiattn.pipeline import DetectionConfig, load_model, state_hash, train, write_outputs

cfg = DetectionConfig(train_scenes=16, val_scenes=8, epochs=2, warmup_iters=4)
result = train(cfg)
print(result.metrics_text())

with tempfile.TemporaryDirectory() as tmp:
    metrics, ckpt = write_outputs(result, tmp)
    again = load_model(ckpt, cfg)
    print("checkpoint reloads bit-exact:", state_hash(again) == state_hash(result.model))

# the head variants are configuration flags
baseline = cfg.replace(use_double_head=False, use_pos_encoding=False, attach_attention_cls=False)
print(train(baseline).history[-1])
