"""多通道湮灭滤波回声恢复工具包。

该包包含以下模块：
- 离散信号与任意频点DFT（spectral_core）
- Toeplitz算子、最小奇异向量、多项式求根（structured_linalg）
- 非盲FRI回声恢复（fri_annihilation）
- 盲多通道交替最小化求解器（mulan_solver）
- 离散时域基线方法 CR / LASSO（baseline_solvers）
- 场景生成与测量合成（scenario_sim）、文件格式（scenario_io）
- 评估指标与实验协议（eval_harness）
- 配置、日志与命令行（config_manager / logger_manager / cli）

注意：不包含作者与时间信息，遵循项目规范。
"""
