"""Snapshot /data before install, after install and after uninstall of the agent app, and print both diffs."""

import argparse

from wifiacq.devicesim import AGENT_PACKAGE, AGENT_UID, PROFILES, build_fixture
from wifiacq.footprint import run_install_scenario


def show(title, diff):
    print(f"== {title}")
    print(f"   added {len(diff.added)}, removed {len(diff.removed)}, modified {len(diff.modified)}")
    for path in sorted(diff.added):
        print(f"   + {path}")
    for path in sorted(diff.removed):
        print(f"   - {path}")
    for path in sorted(diff.modified):
        flag = "content" if "content" in diff.modified[path] else "attrs only"
        print(f"   M {path}  [{', '.join(sorted(diff.modified[path]))}] ({flag})")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="apollo-2.2-rooted")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--package", default=AGENT_PACKAGE)
    ap.add_argument("--uid", type=int, default=AGENT_UID)
    args = ap.parse_args()

    tree = build_fixture(args.seed, args.profile, with_agent=False)
    sc = run_install_scenario(tree, args.package, args.uid, at=1_400_000_000)
    print(f"{args.profile} seed {args.seed}: /data holds {len(sc.before.entries)} entries before install")
    show("snapshot 1 -> 2 (install)", sc.install_diff)
    show("snapshot 2 -> 3 (uninstall)", sc.uninstall_diff)
    print("files whose content changed on uninstall:", ", ".join(sorted(sc.uninstall_diff.content_modified)))


if __name__ == "__main__":
    main()
