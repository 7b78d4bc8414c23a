"""Agent that violates the wire protocol by emitting a non-JSON line."""

import sys

for _ in sys.stdin:
    sys.stdout.write("this is not json\n")
    sys.stdout.flush()
