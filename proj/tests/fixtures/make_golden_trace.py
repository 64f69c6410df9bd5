"""Hand-assembles tests/fixtures/golden.emtr with struct and zlib only.

Two samples, L=2, d=4, k=2 captured tokens, all four sites, 2 heads.
Activation value for (sample s, site code c, layer l, token t, dim i):
    s + c / 10 + l / 100 + t / 1000 + i / 10000   (c: mhsa 1, ffn 2, hidden 3)
Attention row for (sample s, layer l, head h) over seq_len positions p:
    uniform 1/seq_len, seq_len = 3 + s.
"""

import struct
import sys
import zlib

L, D, K, HEADS = 2, 4, 2, 2
LABELS = ["joy", "anger"]
APPRAISALS = ["pleasantness", "other_agency"]
SAMPLES = [
    {"label": 0, "appraisals": [5.0, 1.0]},
    {"label": 1, "appraisals": [1.0, 5.0]},
]


def lp_string(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def activation(s, c, l, t, i):
    return s + c / 10 + l / 100 + t / 1000 + i / 10000


def header(n):
    out = b"EMTR" + struct.pack("<II", 1, 0x01020304)
    out += lp_string("golden-fixture")
    out += struct.pack("<IIIII", L, D, 0xF, K, HEADS)
    out += struct.pack("<Q", n)
    out += struct.pack("<I", len(LABELS)) + b"".join(lp_string(x) for x in LABELS)
    out += struct.pack("<I", len(APPRAISALS)) + b"".join(lp_string(x) for x in APPRAISALS)
    return out


def record(s, sample):
    seq_len = 3 + s
    out = struct.pack("<HI", sample["label"], seq_len)
    out += struct.pack("<%df" % len(APPRAISALS), *sample["appraisals"])
    for code, layers in ((1, range(1, L + 1)), (2, range(1, L + 1)), (3, range(0, L + 1))):
        for l in layers:
            for t in range(K):
                for i in range(D):
                    out += struct.pack("<f", activation(s, code, l, t, i))
    for l in range(L):
        for h in range(HEADS):
            out += struct.pack("<%df" % seq_len, *([1.0 / seq_len] * seq_len))
    return out


def build():
    head = header(len(SAMPLES))
    body = b""
    index = []
    for s, sample in enumerate(SAMPLES):
        rec = record(s, sample)
        index.append((len(head) + len(body), zlib.crc32(rec)))
        body += rec
    data = head + body
    index_offset = len(data)
    for off, crc in index:
        data += struct.pack("<QI", off, crc)
    data += struct.pack("<Q", index_offset)
    data += struct.pack("<I", zlib.crc32(head))
    data += struct.pack("<I", zlib.crc32(data))
    return data


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "golden.emtr"
    with open(path, "wb") as f:
        f.write(build())
