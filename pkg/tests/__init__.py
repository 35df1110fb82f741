"""测试套件初始化

hypolab项目测试入口。
"""
