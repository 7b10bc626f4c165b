#!/usr/bin/env python3
"""Tiny stand-in for a yes/no video-QA endpoint, for exercising vlm-compare.

Speaks the wire shape the client expects: POST JSON with model/prompt/images,
returns {"text": ...}. The default policy answers "Yes" when the decoded
frames show enough inter-frame change (a crude motion heuristic), so synthetic
accident clips mostly map to Yes; --always fixes the answer instead.

    python scripts/vlm_mock_server.py --port 8791
    crashseq vlm-compare --manifest data/manifest.jsonl \
        --endpoint http://127.0.0.1:8791/ --model mock
"""
import argparse
import base64
import io
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image


def motion_answer(images_b64, threshold: float) -> str:
    frames = []
    for blob in images_b64:
        img = Image.open(io.BytesIO(base64.b64decode(blob))).convert("L")
        frames.append(np.asarray(img, dtype=np.float32))
    if len(frames) < 2:
        return "No"
    deltas = [np.abs(b - a).mean() for a, b in zip(frames, frames[1:])]
    spread = max(deltas) / (sum(deltas) / len(deltas) + 1e-9)
    return "Yes" if spread > threshold else "No"


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length))
            answer = (self.server.always or
                      motion_answer(body.get("images", []), self.server.threshold))
        except Exception as err:  # malformed request -> client error
            self.send_error(400, str(err))
            return
        payload = json.dumps({"text": answer}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, fmt, *args):
        print(f"{self.address_string()} {fmt % args}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--port", type=int, default=8791)
    ap.add_argument("--always", choices=("Yes", "No"),
                    help="fixed answer instead of the motion heuristic")
    ap.add_argument("--threshold", type=float, default=1.6,
                    help="peak-to-mean inter-frame change ratio for Yes")
    args = ap.parse_args()
    server = ThreadingHTTPServer(("127.0.0.1", args.port), Handler)
    server.always = args.always
    server.threshold = args.threshold
    print(f"mock endpoint on http://127.0.0.1:{args.port}/ "
          f"(policy: {args.always or f'motion>{args.threshold}'})")
    server.serve_forever()


if __name__ == "__main__":
    main()
