#!/usr/bin/env python3
"""Regenerates protocol/vectors.json from docs/protocol.md alone.

Nothing here imports or runs the Rust code: canonical serialization, request
digests and the mock image are reimplemented from the written protocol, so
the Rust test suite checking these vectors is a cross-implementation check.

Usage: python3 protocol/gen_vectors.py > protocol/vectors.json
"""

import base64
import hashlib
import io
import json
import math
import sys

from PIL import Image

PROMPT = "Satellite image of a nuclear power plant"
M64 = (1 << 64) - 1
HEADER = {"x-synthsat-proto": "1"}


# canonical text ---------------------------------------------------------

def canon(v, level=0):
    pad = "  " * (level + 1)
    if v is None:
        return "null"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        s = "%.6f" % v
        return "0.000000" if s == "-0.000000" else s
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, list):
        if not v:
            return "[]"
        items = [pad + canon(x, level + 1) for x in v]
        return "[\n" + ",\n".join(items) + "\n" + "  " * level + "]"
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [pad + json.dumps(k, ensure_ascii=False) + ": " + canon(v[k], level + 1) for k in sorted(v)]
        return "{\n" + ",\n".join(items) + "\n" + "  " * level + "}"
    raise TypeError(type(v))


def pixel_digest(kind, w, h, raw):
    return hashlib.sha256(("%s:%dx%d:" % (kind, w, h)).encode() + raw).hexdigest()


# maps -------------------------------------------------------------------

RGB_MODALITIES = {"color"}


def png_b64(img):
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def canny_map(n):
    return Image.frombytes("L", (n, n), bytes(255 if x == n // 2 else 0 for y in range(n) for x in range(n)))


def depth_map(n):
    return Image.frombytes("L", (n, n), bytes((255 * x) // (n - 1) for y in range(n) for x in range(n)))


def sketch_map(n):
    return Image.frombytes("L", (n, n), bytes(255 if y == 1 else 0 for y in range(n) for x in range(n)))


def color_map(n):
    raw = bytearray()
    for y in range(n):
        for x in range(n):
            raw += bytes((200, 40, 40) if x < n // 2 else (30, 60, 180))
    return Image.frombytes("RGB", (n, n), bytes(raw))


MAKERS = {"canny": canny_map, "depth": depth_map, "sketch": sketch_map, "color": color_map}


def canonical_request(modalities, maps, weights, seed, px, guidance=10.0, prompt=PROMPT):
    refs = {}
    for m, img in maps.items():
        kind = "RGB8" if img.mode == "RGB" else "L8"
        refs[m] = {"kind": kind, "width": img.width, "height": img.height,
                   "digest": pixel_digest(kind, img.width, img.height, img.tobytes())}
    return canon({
        "protocol": 1,
        "modalities": modalities,
        "maps": refs,
        "weights": {m: float(weights.get(m, 1.0)) for m in modalities},
        "prompt": prompt,
        "text_guidance_scale": float(guidance),
        "synthesis_seed": seed,
        "output_px": px,
    }) + "\n"


# mock image -------------------------------------------------------------

def splitmix(z):
    z = (z + 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def hash_unit(seed, a, b, c):
    x = seed ^ 0x9E3779B97F4A7C15
    for v in (a, b, c):
        x ^= ((v & M64) * 0xBF58476D1CE4E5B9) & M64
        x = splitmix(x)
    return (x >> 11) / float(1 << 53)


def smooth(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(seed, octave, x, y):
    x0, y0 = math.floor(x), math.floor(y)
    tx, ty = smooth(x - x0), smooth(y - y0)
    v = lambda dx, dy: hash_unit(seed, x0 + dx, y0 + dy, octave)
    top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx
    bot = v(0, 1) + (v(1, 1) - v(0, 1)) * tx
    return top + (bot - top) * ty


def fbm(seed, x, y, octaves, persistence):
    s, norm, amp, freq = 0.0, 0.0, 1.0, 1.0
    for o in range(octaves):
        s += amp * value_noise(seed, o, x * freq, y * freq)
        norm += amp
        amp *= persistence
        freq *= 2.0
    return s / norm


def round_half_away(v):
    r = math.floor(v)
    return r + 1 if v - r >= 0.5 else r


def mock_pixels(digest, maps, weights, px):
    seed = int(digest[:16], 16)
    feature = max(px / 8.0, 1.0)
    strength = {m: min(weights.get(m, 1.0) / 2.0, 1.0) for m in maps}
    any_map = next(iter(maps.values()), None)
    mw, mh = (any_map.width, any_map.height) if any_map else (px, px)

    def gray(img, x, y):
        if img.mode == "L":
            return img.getpixel((x, y))
        r, g, b = img.getpixel((x, y))
        return (299 * r + 587 * g + 114 * b + 500) // 1000

    out = bytearray()
    for y in range(px):
        for x in range(px):
            n = fbm(seed, (x + 0.5) / feature, (y + 0.5) / feature, 4, 0.5)
            c = [40.0 + 150.0 * n, 55.0 + 140.0 * n, 35.0 + 110.0 * n]
            sx, sy = x * mw // px, y * mh // px
            if "depth" in maps:
                s = strength["depth"]
                d = gray(maps["depth"], sx, sy) / 255.0
                f = 1.0 - 0.6 * s * (1.0 - d)
                c = [v * f for v in c]
            for m in ("sketch", "canny"):
                if m in maps and gray(maps[m], sx, sy) >= 128:
                    s = strength[m]
                    c = [(1.0 - s) * v + s * 235.0 for v in c]
            if "color" in maps:
                s = strength["color"]
                img = maps["color"]
                b = img.getpixel((sx, sy)) if img.mode == "RGB" else (img.getpixel((sx, sy)),) * 3
                c = [(1.0 - s) * v + s * bb for v, bb in zip(c, b)]
            out += bytes(min(max(round_half_away(v), 0), 255) for v in c)
    return bytes(out)


# vectors ----------------------------------------------------------------

def ok_vector(name, modalities, seed, px, map_px=8, weights=None, guidance=10.0):
    weights = weights or {}
    maps = {m: MAKERS[m](map_px) for m in modalities}
    text = canonical_request(modalities, maps, weights, seed, px, guidance)
    digest = hashlib.sha256(text.encode()).hexdigest()
    body = {
        "protocol": 1,
        "request_digest": digest,
        "prompt": PROMPT,
        "text_guidance_scale": guidance,
        "synthesis_seed": seed,
        "output_px": px,
        "modalities": modalities,
        "weights": {m: w for m, w in weights.items()},
        "maps": {m: png_b64(img) for m, img in maps.items()},
    }
    return {
        "name": name,
        "request": {"method": "POST", "path": "/v1/synthesize", "headers": HEADER, "body": body},
        "canonical_request": text,
        "expect": {
            "status": 200,
            "keys": ["backend_id", "height", "image_png_b64", "metadata", "model_name", "protocol",
                     "request_digest", "width"],
            "echo": {"protocol": 1, "request_digest": digest, "width": px, "height": px,
                     "metadata": {"text_guidance_scale": guidance, "synthesis_seed": seed}},
        },
        "mock": {"pixel_digest": pixel_digest("RGB8", px, px, mock_pixels(digest, maps, weights, px))},
    }


def err_vector(name, method, path, headers, status, code, body=None, body_text=None):
    rq = {"method": method, "path": path, "headers": headers}
    if body is not None:
        rq["body"] = body
    if body_text is not None:
        rq["body_text"] = body_text
    return {"name": name, "request": rq, "expect": {"status": status, "error_code": code}}


def main():
    good = ok_vector("canny_single", ["canny"], 7, 16)
    vectors = [
        {
            "name": "capabilities",
            "request": {"method": "GET", "path": "/v1/capabilities", "headers": HEADER},
            "expect": {"status": 200,
                       "keys": ["backend_id", "max_output_px", "modalities", "model_name", "protocol"],
                       "echo": {"protocol": 1},
                       "modalities_subset_of": ["canny", "depth", "sketch", "color"]},
            "mock": {"body": {"protocol": 1, "backend_id": "synthsat-mock", "model_name": "value-noise-v1",
                              "modalities": ["canny", "depth", "sketch", "color"], "max_output_px": 4096}},
        },
        ok_vector("text_only", [], 42, 16),
        good,
        ok_vector("high_guidance_depth_color", ["depth", "color"], 11, 24, weights={"color": 0.5},
                  guidance=15.0),
        ok_vector("all_four", ["canny", "depth", "sketch", "color"], 3, 16, map_px=12,
                  weights={"canny": 2.0, "sketch": 1.5}),
    ]
    bad = good["request"]["body"]
    vectors += [
        err_vector("missing_protocol_header", "POST", "/v1/synthesize", {}, 400, "unsupported_protocol", body=bad),
        err_vector("wrong_protocol_header", "POST", "/v1/synthesize", {"x-synthsat-proto": "2"}, 400,
                   "unsupported_protocol", body=bad),
        err_vector("wrong_body_protocol", "POST", "/v1/synthesize", HEADER, 400, "unsupported_protocol",
                   body=dict(bad, protocol=2)),
        err_vector("malformed_json", "POST", "/v1/synthesize", HEADER, 400, "malformed_body",
                   body_text="{\"protocol\": 1,"),
        err_vector("unknown_field", "POST", "/v1/synthesize", HEADER, 400, "malformed_body",
                   body=dict(bad, steps=30)),
        err_vector("bad_map_base64", "POST", "/v1/synthesize", HEADER, 400, "malformed_map",
                   body=dict(bad, maps={"canny": "***"})),
        err_vector("digest_mismatch", "POST", "/v1/synthesize", HEADER, 400, "digest_mismatch",
                   body=dict(bad, synthesis_seed=8)),
        err_vector("unknown_modality", "POST", "/v1/synthesize", HEADER, 422, "unsupported_modality",
                   body=dict(bad, modalities=["thermal"], maps={})),
        err_vector("missing_map", "POST", "/v1/synthesize", HEADER, 422, "invalid_request",
                   body=dict(bad, maps={})),
        err_vector("zero_output_px", "POST", "/v1/synthesize", HEADER, 422, "invalid_request",
                   body=dict(bad, output_px=0)),
        err_vector("get_synthesize", "GET", "/v1/synthesize", HEADER, 405, "method_not_allowed"),
        err_vector("post_capabilities", "POST", "/v1/capabilities", HEADER, 405, "method_not_allowed",
                   body_text=""),
        err_vector("unknown_path", "GET", "/v2/synthesize", HEADER, 404, "not_found"),
    ]
    json.dump({"protocol": 1, "vectors": vectors}, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
