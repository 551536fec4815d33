mod conv;
mod elementwise;
mod layout;
mod norm;
mod pool;
mod reduce;
mod region;
