# metagin package
