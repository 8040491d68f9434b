pub mod config;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nls;
pub mod pipeline;
pub mod pose_graph;
pub mod radar_odometry;
pub mod rte;
pub mod sim;
