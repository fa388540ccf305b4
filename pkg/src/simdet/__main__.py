if __name__ == "__main__":
    import sys

    from simdet.harness.cli import main

    sys.exit(main())
