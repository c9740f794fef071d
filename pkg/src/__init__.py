# h-PMD policy mirror descent library
