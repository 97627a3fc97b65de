from geokv.cli import main

raise SystemExit(main())
