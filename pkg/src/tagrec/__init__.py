"""tagrec: an interest-mined, tag-aware retrieval pipeline.

Raw behavior logs are compressed into a prompt-ready form, an LLM
gateway mines interest profiles and predicts item tags, a tri-tower
model retrieves items by fused collaborative/semantic scores, and a
human-LLM judge loop screens every generated artifact.
"""

__version__ = "0.1.0"
