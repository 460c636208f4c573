"""HTTP adapters that expose models behind the vla agent wire protocol.

Three servers, one per agent role:

- detector:   POST /detect    -> COCO-results-shaped array
- classifier: POST /classify  -> {"label": <candidate>, "confidence": p}
- linguistic: POST /v1/chat/completions, normalizing vendor APIs to the
  chat-completions shape and adding no content

All adapters are stateless between requests and validate against the
pipeline's published schemas (`vla validate-protocol`).
"""

__version__ = "0.1.0"
