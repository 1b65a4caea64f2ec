"""
The wire format
===============

Platforms and the coordinator exchange length-prefixed binary frames. This
demo builds each message kind, shows its encoded bytes, and decodes a stream
of concatenated frames back into messages.
"""

import numpy as np

from fedner import transport as tp

# %%
# One frame per message kind
# --------------------------
# A frame is a 4-byte big-endian body length followed by the body: version,
# kind and sender id, then kind-specific little-endian fields.
params = np.array([0.5, -1.25, 3.0])
packet = tp.GradientPacket(platform=2, round=7, gradient=np.array([0.1, 0.2, -0.3]), weight=500, loss=1.75)
messages = [
    tp.register(sender=2, count=500),
    tp.round_start(7, params, batch=16),
    tp.gradient(packet),
    tp.broadcast(7, params),
    tp.shutdown(),
]
for msg in messages:
    frame = tp.encode(msg)
    print(f"{msg.kind.name:>16} {len(frame):3d} bytes  {frame[:16].hex(' ')}{' ...' if len(frame) > 16 else ''}")

# %%
# Decode a stream
# ---------------
# Frames are self-delimiting, so a byte stream splits back into messages.
stream = b"".join(tp.encode(m) for m in messages)
decoded = tp.decode_stream(stream)
assert decoded == messages
print(f"decoded {len(decoded)} messages, bit-identical: {decoded[2].packet.gradient.tobytes() == packet.gradient.tobytes()}")

# %%
# Malformed input is rejected
# ---------------------------
for bad in (stream[:10], b"\x00\x00\x00\x06\x09\x01\x00\x00\x00\x00"):
    try:
        tp.decode(bad)
    except tp.DecodeError as err:
        print(f"{type(err).__name__}: {err}")
