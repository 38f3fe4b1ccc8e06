"""Run the acceptance checks and print one PASS/FAIL line each.

usage: python scripts/run_acceptance.py [criterion ...]
"""
import sys

from suspension import acceptance


def main(argv):
    numbers = {int(a) for a in argv} or None
    checks = acceptance.run(numbers)
    total = sum(c.seconds for c in checks)
    print(f"{sum(c.passed for c in checks)}/{len(checks)} passed in {total:.0f} s")
    return 0 if all(c.passed for c in checks) else 4


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
