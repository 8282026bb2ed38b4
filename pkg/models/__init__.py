"""Recognition network, codec and checkpoint files."""
