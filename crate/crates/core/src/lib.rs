pub mod autodiff;
pub mod gconv;
pub mod groups;
pub mod model;
pub mod checkpoint;
pub mod data;
pub mod report;
pub mod seeds;
pub mod nas_diff;
pub mod nas_evo;
pub mod train;
pub mod verify;
