"""Strong scaling of the DFN solve over thread counts (wraps the scale-bench command)."""
import sys

from polypcg.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--nf", "500", "--degree", "31", "--xi", "1e-3", "--thread-list", "1,2,4,8",
                            "--repeats", "2", "--csv", "scaling.csv"]
    sys.exit(main(["scale-bench", *args]))
