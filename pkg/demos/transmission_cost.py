"""
What goes over the air
======================

Late fusion sends boxes, instance-level cooperation sends two feature
vectors and a reference point per instance, and a dense BEV feature map
sends a whole grid. Bytes per second at 10 Hz for each, with the real
encoder.
"""
import numpy as np

from cooptrack.fusion import (V2XMessage, box_message_bytes, decode_message, dense_grid_bytes, encode_message,
                              instance_bytes)

d, rate = 32, 10.0
rng = np.random.default_rng(0)
msg = V2XMessage(rng.normal(size=(10, d)), rng.normal(size=(10, d)), rng.normal(size=(10, 3)) * 20,
                 rng.random(10), rng.integers(0, 3, 10))
buf = encode_message(msg)
print(f"one instance: {instance_bytes(d)} B; a 10-instance frame: {len(buf)} B (4 B count header)")
back = decode_message(buf, d)
print(f"float32 round trip error: {np.abs(back.M - msg.M).max():.1e}")

print(f"{'instances':>9} {'late fusion':>12} {'instances':>12} {'dense grid':>12}")
for n in (1, 10, 25, 50):
    m = V2XMessage(rng.normal(size=(n, d)), rng.normal(size=(n, d)), np.zeros((n, 3)), np.ones(n), np.zeros(n, int))
    late, inst, dense = box_message_bytes(n) * rate, len(encode_message(m)) * rate, dense_grid_bytes(d) * rate
    print(f"{n:9d} {late:10.0f}/s {inst:10.0f}/s {dense:10.3g}/s   dense/instances = {dense / inst:.0f}x")
