from icstn.cli import main; import sys; sys.exit(main())
