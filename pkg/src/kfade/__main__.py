from kfade.cli import main

raise SystemExit(main())
