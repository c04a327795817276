from capsphere.cli import main

main()
