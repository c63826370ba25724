from .bench_cli import main

raise SystemExit(main())
