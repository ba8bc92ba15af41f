# Utils package




